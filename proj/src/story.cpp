#include "storydiff/story.hpp"

#include <zlib.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <json.hpp>

namespace storydiff {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// catalogs
// ---------------------------------------------------------------------------

std::vector<CharacterSpec> roster_for_profile(const std::string& profile) {
    // saturated, mutually distinct colors; scene/decor palettes stay muted so
    // exact-color glyph matching cannot collide with backgrounds
    static const std::vector<CharacterSpec> kPororo = {
        {"pororo", 0, {220, 30, 30}},   {"crong", 1, {30, 60, 220}},
        {"poby", 2, {20, 180, 40}},     {"loopy", 3, {240, 210, 30}},
        {"eddy", 4, {200, 40, 200}},    {"petty", 5, {30, 200, 220}},
        {"harry", 6, {240, 130, 20}},   {"rody", 7, {130, 40, 220}},
        {"tongtong", 8, {245, 245, 245}},
    };
    static const std::vector<CharacterSpec> kFlintstones = {
        {"fred", 0, {220, 30, 30}},    {"wilma", 1, {30, 60, 220}},
        {"barney", 2, {20, 180, 40}},  {"betty", 3, {240, 210, 30}},
        {"pebbles", 4, {200, 40, 200}}, {"dino", 5, {30, 200, 220}},
        {"slate", 6, {240, 130, 20}},
    };
    if (profile == "pororo") return kPororo;
    if (profile == "flintstones") return kFlintstones;
    throw ValidationError("unknown roster profile: " + profile);
}

std::vector<SceneSpec> scene_catalog() {
    return {
        {"snowfield", {170, 200, 230}, {235, 240, 245}, {205, 215, 228}, 12},
        {"forest", {150, 190, 160}, {60, 120, 70}, {42, 95, 55}, 10},
        {"kitchen", {225, 215, 190}, {160, 120, 80}, {130, 95, 60}, 14},
        {"bedroom", {205, 185, 210}, {120, 90, 130}, {100, 70, 110}, 13},
        {"beach", {135, 190, 225}, {225, 200, 140}, {205, 178, 118}, 15},
        {"playground", {190, 210, 150}, {140, 160, 90}, {115, 135, 72}, 11},
    };
}

namespace {

const std::array<Rgb, 6> kDecorPalette = {{{90, 140, 200},
                                           {200, 160, 90},
                                           {120, 190, 120},
                                           {190, 110, 130},
                                           {150, 130, 190},
                                           {180, 180, 110}}};

const std::vector<std::string> kVerbs = {"talking", "playing", "sleeping", "running", "jumping",
                                         "reading", "eating", "singing", "dancing", "waving"};

const std::vector<std::vector<std::string>> kFillers = {
    {"quietly"}, {"happily"}, {"together"}, {"once", "more"},
    {"this", "morning"}, {"all", "day", "long"}};

// 5 non-overlapping glyph slots (centers); glyph boxes span rows 10..27, so
// the bottom four rows are always pure background for the scene oracle
const std::array<std::pair<int, int>, 5> kSlots = {{{14, 5}, {14, 16}, {14, 26}, {23, 10}, {23, 21}}};

bool glyph_mask(int shape, int dy, int dx) {
    int r2 = dx * dx + dy * dy;
    int row = dy + kGlyphRadius;  // 0..8
    switch (shape) {
        case 0: return r2 <= 16;                                     // circle
        case 1: return true;                                         // square
        case 2: return std::abs(dx) * 2 <= row;                      // triangle up
        case 3: return std::abs(dx) * 2 <= 8 - row;                  // triangle down
        case 4: return std::abs(dx) + std::abs(dy) <= 4;             // diamond
        case 5: return std::abs(dx) <= 1 || std::abs(dy) <= 1;       // cross
        case 6: return r2 <= 16 && r2 >= 7;                          // ring
        case 7: return std::abs(dx - dy) <= 1 || std::abs(dx + dy) <= 1;  // x
        case 8: return ((dx + dy) & 1) == 0;                         // checker
        default: throw ValidationError("unknown glyph shape");
    }
}

inline void put_px(ImageU8& img, int y, int x, Rgb c) {
    size_t i = (size_t(y) * size_t(img.width) + size_t(x)) * 3;
    img.rgb[i] = c.r;
    img.rgb[i + 1] = c.g;
    img.rgb[i + 2] = c.b;
}

inline Rgb get_px(const ImageU8& img, int y, int x) {
    size_t i = (size_t(y) * size_t(img.width) + size_t(x)) * 3;
    return {img.rgb[i], img.rgb[i + 1], img.rgb[i + 2]};
}

Rgb blend(Rgb a, Rgb b, double wb) {
    auto mix = [wb](uint8_t x, uint8_t y) {
        return uint8_t(std::lround((1.0 - wb) * x + wb * y));
    };
    return {mix(a.r, b.r), mix(a.g, b.g), mix(a.b, b.b)};
}

uint64_t split_tag(const std::string& split) {
    if (split == "train") return 1;
    if (split == "valid") return 2;
    if (split == "test") return 3;
    throw ValidationError("unknown split: " + split);
}

// Scene patterns for 5-frame stories. Index 1 always carries a scene unique
// to the story (an irrelevant-history case); the other positions repeat
// scenes at distance >= 2 so a similar history frame exists.
const std::vector<std::vector<int>> kPatterns5 = {
    {0, 1, 0, 0, 0}, {0, 1, 0, 2, 0}, {0, 1, 2, 0, 1}, {0, 1, 0, 2, 1}};
const std::vector<double> kPatternWeights5 = {0.4, 0.2, 0.2, 0.2};

std::vector<int> scene_pattern(int L, Rng& rng) {
    if (L == 5) {
        double u = rng.uniform();
        double acc = 0.0;
        for (size_t i = 0; i < kPatterns5.size(); ++i) {
            acc += kPatternWeights5[i];
            if (u < acc) return kPatterns5[i];
        }
        return kPatterns5.back();
    }
    // generic fallback: dominant scene everywhere except a unique scene at
    // index 1 (for L == 2 a repeat at distance >= 2 is impossible)
    std::vector<int> p(size_t(L), 0);
    if (L >= 2) p[1] = 1;
    return p;
}

struct StoryPlan {
    std::vector<Frame> frames;  // images not rendered yet
};

StoryPlan plan_story(const DatasetManifest& m, const std::string& split, int index) {
    const int L = m.params.story_len;
    Rng rng = Rng(m.params.seed).fork(split_tag(split)).fork(uint64_t(index));

    std::vector<int> pattern = scene_pattern(L, rng);
    int n_letters = *std::max_element(pattern.begin(), pattern.end()) + 1;

    // distinct scene ids for the pattern letters
    std::vector<int> scene_ids(m.scenes.size());
    for (size_t i = 0; i < scene_ids.size(); ++i) scene_ids[i] = int(i);
    for (size_t i = 0; i < scene_ids.size(); ++i)
        std::swap(scene_ids[i], scene_ids[i + size_t(rng.below(scene_ids.size() - i))]);
    scene_ids.resize(size_t(n_letters));

    // story cast: 2..4 distinct characters
    int cast_n = 2 + int(rng.below(3));
    cast_n = std::min<int>(cast_n, int(m.roster.size()));
    std::vector<int> all_chars(m.roster.size());
    for (size_t i = 0; i < all_chars.size(); ++i) all_chars[i] = int(i);
    for (size_t i = 0; i < all_chars.size(); ++i)
        std::swap(all_chars[i], all_chars[i + size_t(rng.below(all_chars.size() - i))]);
    std::vector<int> cast(all_chars.begin(), all_chars.begin() + cast_n);

    // per-letter decoration seed, shared by repeated scenes within the story
    std::vector<uint32_t> decor(static_cast<size_t>(n_letters));
    for (auto& d : decor) d = uint32_t(rng.next_u64());

    StoryPlan plan;
    for (int f = 0; f < L; ++f) {
        Frame fr;
        fr.scene_id = scene_ids[size_t(pattern[size_t(f)])];

        int k = 1 + int(rng.below(3));
        k = std::min(k, cast_n);
        std::vector<int> pool = cast;
        for (size_t i = 0; i < pool.size(); ++i)
            std::swap(pool[i], pool[i + size_t(rng.below(pool.size() - i))]);
        for (int i = 0; i < k; ++i) fr.characters.insert(pool[size_t(i)]);

        uint32_t placement = uint32_t(rng.next_u64());
        fr.pose_seed = (uint64_t(decor[size_t(pattern[size_t(f)])]) << 32) | placement;

        const std::string& verb = kVerbs[rng.below(kVerbs.size())];
        std::vector<std::string> words;
        bool first = true;
        for (int c : fr.characters) {
            if (!first) words.push_back("and");
            words.push_back(m.roster[size_t(c)].name);
            first = false;
        }
        words.push_back(fr.characters.size() > 1 ? "are" : "is");
        words.push_back(verb);
        words.push_back("in");
        words.push_back("the");
        words.push_back(m.scenes[size_t(fr.scene_id)].name);
        if (rng.uniform() < 0.5) {
            const auto& filler = kFillers[rng.below(kFillers.size())];
            words.insert(words.end(), filler.begin(), filler.end());
        }
        for (size_t i = 0; i < words.size(); ++i) {
            if (i) fr.prompt += ' ';
            fr.prompt += words[i];
        }
        plan.frames.push_back(std::move(fr));
    }
    return plan;
}

std::string story_id_for(const std::string& split, int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s-%05d", split.c_str(), index);
    return buf;
}

uint32_t file_crc32(const std::vector<uint8_t>& bytes) {
    return uint32_t(crc32(0, bytes.data(), uInt(bytes.size())));
}

}  // namespace

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

const std::vector<std::string>& vocabulary() {
    static const std::vector<std::string> vocab = [] {
        std::vector<std::string> v = {"<pad>"};
        for (const auto& profile : {"pororo", "flintstones"})
            for (const auto& c : roster_for_profile(profile))
                if (std::find(v.begin(), v.end(), c.name) == v.end()) v.push_back(c.name);
        for (const auto& s : scene_catalog()) v.push_back(s.name);
        for (const auto& w : kVerbs) v.push_back(w);
        for (const auto& w : {"is", "are", "and", "in", "the"}) v.push_back(w);
        for (const auto& filler : kFillers)
            for (const auto& w : filler)
                if (std::find(v.begin(), v.end(), w) == v.end()) v.push_back(w);
        return v;
    }();
    return vocab;
}

int vocab_id(const std::string& token) {
    const auto& v = vocabulary();
    for (size_t i = 0; i < v.size(); ++i)
        if (v[i] == token) return int(i);
    throw ValidationError("token not in vocabulary: '" + token + "'");
}

std::vector<int> tokenize(const std::string& prompt) {
    std::vector<int> ids;
    std::string cur;
    for (char ch : prompt + " ") {
        if (ch == ' ') {
            if (!cur.empty()) ids.push_back(vocab_id(cur));
            cur.clear();
        } else {
            cur += char(std::tolower(static_cast<unsigned char>(ch)));
        }
    }
    if (ids.empty()) throw ValidationError("empty prompt");
    return ids;
}

uint64_t vocabulary_hash() {
    uint64_t h = 0xCBF29CE484222325ull;
    for (const auto& w : vocabulary()) h = fnv1a64(w + "\n", h);
    return h;
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

ImageU8 render_frame(const std::vector<CharacterSpec>& roster, const std::vector<SceneSpec>& scenes,
                     const std::set<int>& characters, int scene_id, uint64_t pose_seed) {
    if (scene_id < 0 || size_t(scene_id) >= scenes.size())
        throw ValidationError("render_frame: unknown scene id");
    for (int c : characters)
        if (c < 0 || size_t(c) >= roster.size())
            throw ValidationError("render_frame: unknown character id");

    const SceneSpec& sc = scenes[size_t(scene_id)];
    ImageU8 img;
    img.width = kFrameSize;
    img.height = kFrameSize;
    img.rgb.assign(size_t(kFrameSize) * kFrameSize * 3, 0);

    Rng drng = Rng(pose_seed >> 32).fork(11);
    Rng prng = Rng(pose_seed & 0xFFFFFFFFull).fork(13);

    // sky, tinted by the story/scene decoration color
    Rgb decor = kDecorPalette[drng.below(kDecorPalette.size())];
    Rgb sky = blend(sc.sky, decor, 0.38);
    for (int y = 0; y < sc.horizon; ++y)
        for (int x = 0; x < kFrameSize; ++x) put_px(img, y, x, sky);

    // ground with a striped motif; bottom rows never touched by glyphs/decor
    for (int y = sc.horizon; y < kFrameSize; ++y) {
        bool motif_row = (y - sc.horizon) % 3 == 2;
        for (int x = 0; x < kFrameSize; ++x) put_px(img, y, x, motif_row ? sc.motif : sc.ground);
    }

    // decoration accents in the sky
    for (int i = 0; i < 8; ++i) {
        int y = int(drng.below(uint64_t(std::max(1, sc.horizon - 2))));
        int x = int(drng.below(kFrameSize - 1));
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) put_px(img, y + dy, x + dx, decor);
    }

    // characters at distinct slots, assigned in sorted id order
    std::array<int, 5> order = {0, 1, 2, 3, 4};
    for (size_t i = 0; i < order.size(); ++i)
        std::swap(order[i], order[i + size_t(prng.below(order.size() - i))]);
    size_t slot_i = 0;
    for (int c : characters) {
        if (slot_i >= order.size()) break;
        auto [cy, cx] = kSlots[size_t(order[slot_i++])];
        const CharacterSpec& spec = roster[size_t(c)];
        for (int dy = -kGlyphRadius; dy <= kGlyphRadius; ++dy)
            for (int dx = -kGlyphRadius; dx <= kGlyphRadius; ++dx)
                if (glyph_mask(spec.shape, dy, dx)) put_px(img, cy + dy, cx + dx, spec.color);
    }
    return img;
}

int oracle_detect_scene(const ImageU8& img, const std::vector<SceneSpec>& scenes) {
    // the bottom four rows are always pure ground/motif; nearest expected mean
    auto bottom_mean = [](const ImageU8& im) {
        double m[3] = {0, 0, 0};
        int n = 0;
        for (int y = im.height - 4; y < im.height; ++y)
            for (int x = 0; x < im.width; ++x) {
                Rgb p = get_px(im, y, x);
                m[0] += p.r;
                m[1] += p.g;
                m[2] += p.b;
                ++n;
            }
        return std::array<double, 3>{m[0] / n, m[1] / n, m[2] / n};
    };
    auto probe = bottom_mean(img);
    int best = -1;
    double best_d = 1e18;
    for (size_t s = 0; s < scenes.size(); ++s) {
        ImageU8 ref = render_frame({}, scenes, {}, int(s), 0);
        auto rm = bottom_mean(ref);
        double d = 0;
        for (int k = 0; k < 3; ++k) d += (probe[k] - rm[k]) * (probe[k] - rm[k]);
        if (d < best_d) {
            best_d = d;
            best = int(s);
        }
    }
    return best;
}

std::set<int> oracle_detect_characters(const ImageU8& img,
                                       const std::vector<CharacterSpec>& roster) {
    std::set<int> found;
    for (size_t c = 0; c < roster.size(); ++c) {
        const CharacterSpec& spec = roster[c];
        for (const auto& [cy, cx] : kSlots) {
            bool all = true;
            for (int dy = -kGlyphRadius; dy <= kGlyphRadius && all; ++dy)
                for (int dx = -kGlyphRadius; dx <= kGlyphRadius && all; ++dx)
                    if (glyph_mask(spec.shape, dy, dx) &&
                        !(get_px(img, cy + dy, cx + dx) == spec.color))
                        all = false;
            if (all) {
                found.insert(int(c));
                break;
            }
        }
    }
    return found;
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

void DatasetParams::validate() const {
    if (n_train < 1 || n_valid < 1 || n_test < 1)
        throw ValidationError("dataset counts must be >= 1");
    if (story_len < 2) throw ValidationError("story_len must be >= 2");
    roster_for_profile(profile);  // throws on unknown profile
}

const std::vector<std::string>& DatasetManifest::split_ids(const std::string& split) const {
    auto it = splits.find(split);
    if (it == splits.end()) throw ValidationError("unknown split: " + split);
    return it->second;
}

DatasetManifest generate_manifest(const DatasetParams& params) {
    params.validate();
    DatasetManifest m;
    m.params = params;
    m.roster = roster_for_profile(params.profile);
    m.scenes = scene_catalog();
    auto fill = [&](const std::string& split, int n) {
        auto& ids = m.splits[split];
        for (int i = 0; i < n; ++i) ids.push_back(story_id_for(split, i));
    };
    fill("train", params.n_train);
    fill("valid", params.n_valid);
    fill("test", params.n_test);
    return m;
}

StoryRecord generate_story(const DatasetManifest& m, const std::string& split, int index) {
    if (index < 0 || size_t(index) >= m.split_ids(split).size())
        throw ValidationError("story index out of range");
    StoryPlan plan = plan_story(m, split, index);
    StoryRecord rec;
    rec.story_id = story_id_for(split, index);
    rec.frames = std::move(plan.frames);
    for (auto& fr : rec.frames)
        fr.image = render_frame(m.roster, m.scenes, fr.characters, fr.scene_id, fr.pose_seed);
    return rec;
}

double history_dependency_fraction(const DatasetManifest& m, const std::string& split) {
    int64_t have = 0, total = 0;
    int n = int(m.split_ids(split).size());
    for (int i = 0; i < n; ++i) {
        StoryPlan plan = plan_story(m, split, i);
        for (size_t j = 2; j < plan.frames.size(); ++j) {
            ++total;
            for (size_t k = 0; k + 2 <= j; ++k)
                if (plan.frames[k].scene_id == plan.frames[j].scene_id) {
                    ++have;
                    break;
                }
        }
    }
    return total ? double(have) / double(total) : 0.0;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

namespace {

json rgb_json(Rgb c) { return json::array({c.r, c.g, c.b}); }

Rgb rgb_from(const json& j) {
    return {uint8_t(j.at(0).get<int>()), uint8_t(j.at(1).get<int>()), uint8_t(j.at(2).get<int>())};
}

}  // namespace

void save_manifest(const DatasetManifest& m, const std::string& dir) {
    fs::create_directories(dir);
    json j;
    j["format"] = "shapestories-v1";
    j["seed"] = m.params.seed;
    j["profile"] = m.params.profile;
    j["story_len"] = m.params.story_len;
    j["counts"] = {{"train", m.params.n_train}, {"valid", m.params.n_valid},
                   {"test", m.params.n_test}};
    json roster = json::array();
    for (size_t i = 0; i < m.roster.size(); ++i)
        roster.push_back({{"id", i},
                          {"name", m.roster[i].name},
                          {"shape", m.roster[i].shape},
                          {"color", rgb_json(m.roster[i].color)}});
    j["roster"] = roster;
    json scenes = json::array();
    for (size_t i = 0; i < m.scenes.size(); ++i)
        scenes.push_back({{"id", i},
                          {"name", m.scenes[i].name},
                          {"sky", rgb_json(m.scenes[i].sky)},
                          {"ground", rgb_json(m.scenes[i].ground)},
                          {"motif", rgb_json(m.scenes[i].motif)},
                          {"horizon", m.scenes[i].horizon}});
    j["scenes"] = scenes;
    j["split"] = m.splits;
    json all = json::array();
    for (const auto& split : {"train", "valid", "test"})
        for (const auto& id : m.split_ids(split)) all.push_back(id);
    j["stories"] = all;

    std::ofstream f(dir + "/manifest.json");
    if (!f) throw IoError("cannot write manifest: " + dir);
    f << j.dump(1) << "\n";
}

DatasetManifest load_manifest(const std::string& dir) {
    std::ifstream f(dir + "/manifest.json");
    if (!f) throw IoError("cannot open manifest: " + dir + "/manifest.json");
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed manifest: ") + e.what());
    }
    try {
        DatasetManifest m;
        m.params.seed = j.at("seed").get<uint64_t>();
        m.params.profile = j.at("profile").get<std::string>();
        m.params.story_len = j.at("story_len").get<int>();
        m.params.n_train = j.at("counts").at("train").get<int>();
        m.params.n_valid = j.at("counts").at("valid").get<int>();
        m.params.n_test = j.at("counts").at("test").get<int>();
        for (const auto& r : j.at("roster"))
            m.roster.push_back({r.at("name").get<std::string>(), r.at("shape").get<int>(),
                                rgb_from(r.at("color"))});
        for (const auto& s : j.at("scenes"))
            m.scenes.push_back({s.at("name").get<std::string>(), rgb_from(s.at("sky")),
                                rgb_from(s.at("ground")), rgb_from(s.at("motif")),
                                s.at("horizon").get<int>()});
        m.splits = j.at("split").get<std::map<std::string, std::vector<std::string>>>();
        m.params.validate();
        return m;
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed manifest: ") + e.what());
    }
}

void save_story(const StoryRecord& record, const std::string& story_dir) {
    if (record.frames.size() < 2) throw ValidationError("story must have at least 2 frames");
    fs::create_directories(story_dir + "/frames");
    json j;
    j["story_id"] = record.story_id;
    json frames = json::array();
    for (size_t k = 0; k < record.frames.size(); ++k) {
        const Frame& fr = record.frames[k];
        auto png = encode_png_rgb8(fr.image);
        std::ofstream f(story_dir + "/frames/" + std::to_string(k) + ".png", std::ios::binary);
        if (!f) throw IoError("cannot write frame " + std::to_string(k));
        f.write(reinterpret_cast<const char*>(png.data()), std::streamsize(png.size()));
        frames.push_back({{"prompt", fr.prompt},
                          {"characters", fr.characters},
                          {"scene_id", fr.scene_id},
                          {"pose_seed", std::to_string(fr.pose_seed)},
                          {"png_crc32", file_crc32(png)}});
    }
    j["frames"] = frames;
    std::ofstream f(story_dir + "/story.json");
    if (!f) throw IoError("cannot write story.json in " + story_dir);
    f << j.dump(1) << "\n";
}

StoryRecord load_story(const std::string& story_dir) {
    std::ifstream f(story_dir + "/story.json");
    if (!f) throw IoError("cannot open story: " + story_dir + "/story.json");
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed story.json: ") + e.what());
    }
    StoryRecord rec;
    try {
        rec.story_id = j.at("story_id").get<std::string>();
        size_t n = j.at("frames").size();
        if (n < 2) throw ValidationError("story has fewer than 2 frames: " + rec.story_id);
        for (size_t k = 0; k < n; ++k) {
            const json& fj = j.at("frames").at(k);
            Frame fr;
            fr.prompt = fj.at("prompt").get<std::string>();
            for (int c : fj.at("characters")) fr.characters.insert(c);
            if (fr.characters.empty())
                throw ValidationError("frame " + std::to_string(k) + " has no characters");
            fr.scene_id = fj.at("scene_id").get<int>();
            fr.pose_seed = std::stoull(fj.at("pose_seed").get<std::string>());

            std::string path = story_dir + "/frames/" + std::to_string(k) + ".png";
            std::ifstream pf(path, std::ios::binary);
            if (!pf) throw IoError("missing frame " + std::to_string(k) + ": " + path);
            std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(pf)),
                                       std::istreambuf_iterator<char>());
            if (file_crc32(bytes) != fj.at("png_crc32").get<uint32_t>())
                throw IoError("checksum mismatch on frame " + std::to_string(k) + ": " + path);
            try {
                fr.image = decode_png_rgb8(bytes.data(), bytes.size());
            } catch (const IoError& e) {
                throw IoError("frame " + std::to_string(k) + " unreadable: " + e.what());
            }
            rec.frames.push_back(std::move(fr));
        }
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed story.json: ") + e.what());
    }
    return rec;
}

StoryRecord load_story_from_dataset(const std::string& dataset_dir, const std::string& story_id) {
    return load_story(dataset_dir + "/stories/" + story_id);
}

void materialize_dataset(const DatasetManifest& m, const std::string& dir) {
    save_manifest(m, dir);
    for (const auto& split : {"train", "valid", "test"}) {
        int n = int(m.split_ids(split).size());
        for (int i = 0; i < n; ++i) {
            StoryRecord rec = generate_story(m, split, i);
            save_story(rec, dir + "/stories/" + rec.story_id);
        }
    }
}

}  // namespace storydiff
