#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>

#include "storydiff/png_io.hpp"

namespace storydiff {

// ---------------------------------------------------------------------------
// ShapeStories: a procedural story dataset with a fixed character roster
// (distinct glyph/color per character), a small scene catalog (distinct
// background palettes), and per-story scene repetition so that most frames
// have a semantically similar predecessor. Frames that share a scene within
// one story also share a randomly drawn "decoration" (sky tint + accents)
// that is not inferable from the prompt, only from history.
// ---------------------------------------------------------------------------

constexpr int kFrameSize = 32;
constexpr int kGlyphRadius = 4;  // glyphs are 9x9

struct Rgb {
    uint8_t r = 0, g = 0, b = 0;
    bool operator==(const Rgb& o) const { return r == o.r && g == o.g && b == o.b; }
};

struct CharacterSpec {
    std::string name;
    int shape = 0;  // index into the glyph shape table
    Rgb color;
};

struct SceneSpec {
    std::string name;
    Rgb sky, ground, motif;
    int horizon = 12;
};

struct Frame {
    std::string prompt;
    std::set<int> characters;
    int scene_id = 0;
    uint64_t pose_seed = 0;  // low 32 bits: placement, high 32 bits: decoration
    ImageU8 image;
};

struct StoryRecord {
    std::string story_id;
    std::vector<Frame> frames;
};

struct DatasetParams {
    int n_train = 2000;
    int n_valid = 200;
    int n_test = 200;
    uint64_t seed = 17;
    int story_len = 5;
    std::string profile = "pororo";  // pororo (9 characters) or flintstones (7)

    void validate() const;
};

struct DatasetManifest {
    DatasetParams params;
    std::vector<CharacterSpec> roster;
    std::vector<SceneSpec> scenes;
    std::map<std::string, std::vector<std::string>> splits;  // train/valid/test -> story ids

    const std::vector<std::string>& split_ids(const std::string& split) const;
};

// roster/scene catalogs
std::vector<CharacterSpec> roster_for_profile(const std::string& profile);
std::vector<SceneSpec> scene_catalog();

// closed vocabulary shared by every profile; index 0 is the pad token
const std::vector<std::string>& vocabulary();
int vocab_id(const std::string& token);  // throws ValidationError on unknown tokens
std::vector<int> tokenize(const std::string& prompt);
uint64_t vocabulary_hash();

// deterministic generation
DatasetManifest generate_manifest(const DatasetParams& params);
StoryRecord generate_story(const DatasetManifest& m, const std::string& split, int index);
void materialize_dataset(const DatasetManifest& m, const std::string& dir);

// rendering
ImageU8 render_frame(const std::vector<CharacterSpec>& roster, const std::vector<SceneSpec>& scenes,
                     const std::set<int>& characters, int scene_id, uint64_t pose_seed);

// pixel-space oracles (independent of any trained model)
int oracle_detect_scene(const ImageU8& img, const std::vector<SceneSpec>& scenes);
std::set<int> oracle_detect_characters(const ImageU8& img, const std::vector<CharacterSpec>& roster);

// persistence
void save_manifest(const DatasetManifest& m, const std::string& dir);
DatasetManifest load_manifest(const std::string& dir);
void save_story(const StoryRecord& record, const std::string& story_dir);
StoryRecord load_story(const std::string& story_dir);
StoryRecord load_story_from_dataset(const std::string& dataset_dir, const std::string& story_id);

// fraction of frames at index >= 2 that have a same-scene predecessor at
// distance >= 2 (the frames for which such a predecessor is structurally
// possible); the generator keeps this >= 0.6 per split
double history_dependency_fraction(const DatasetManifest& m, const std::string& split);

}  // namespace storydiff
