#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "storydiff/story.hpp"

using namespace storydiff;
namespace fs = std::filesystem;

namespace {

DatasetParams small_params(uint64_t seed = 7) {
    DatasetParams p;
    p.n_train = 24;
    p.n_valid = 6;
    p.n_test = 6;
    p.seed = seed;
    return p;
}

uint64_t dir_hash(const std::string& dir) {
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir).string());
    std::sort(files.begin(), files.end());
    uint64_t h = 0xCBF29CE484222325ull;
    for (const auto& rel : files) {
        h = fnv1a64(rel, h);
        std::ifstream f(dir + "/" + rel, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
        h = fnv1a64(bytes.data(), bytes.size(), h);
    }
    return h;
}

}  // namespace

TEST_CASE("png round trip and error contracts") {
    ImageU8 img;
    img.width = 32;
    img.height = 32;
    img.rgb.resize(32 * 32 * 3);
    Rng rng(5);
    for (auto& v : img.rgb) v = uint8_t(rng.below(256));

    auto bytes = encode_png_rgb8(img);
    auto back = decode_png_rgb8(bytes.data(), bytes.size());
    CHECK(back == img);

    // deterministic encoding
    CHECK(encode_png_rgb8(img) == bytes);

    // truncation and corruption
    CHECK_THROWS_AS(decode_png_rgb8(bytes.data(), bytes.size() / 2), IoError);
    CHECK_THROWS_AS(decode_png_rgb8(bytes.data(), 4), IoError);
    auto corrupted = bytes;
    corrupted[40] ^= 0xFF;
    CHECK_THROWS_AS(decode_png_rgb8(corrupted.data(), corrupted.size()), IoError);
}

TEST_CASE("u8/real pixel mapping round trips exactly") {
    ImageU8 img;
    img.width = 16;
    img.height = 1;
    for (int i = 0; i < 48; ++i) img.rgb.push_back(uint8_t(i * 5));
    auto t = image_to_tensor<double>(img);
    CHECK(t.dim(0) == 3);
    auto back = tensor_to_image(t);
    CHECK(back == img);
}

TEST_CASE("render is deterministic and pose seed varies placement only") {
    auto roster = roster_for_profile("pororo");
    auto scenes = scene_catalog();

    auto a = render_frame(roster, scenes, {}, 0, 12345);
    auto b = render_frame(roster, scenes, {}, 0, 12345);
    CHECK(a == b);

    auto c = render_frame(roster, scenes, {0, 3}, 2, 777);
    auto d = render_frame(roster, scenes, {0, 3}, 2, 778);
    CHECK_FALSE(c == d);
    CHECK(oracle_detect_scene(c, scenes) == 2);
    CHECK(oracle_detect_scene(d, scenes) == 2);

    CHECK_THROWS_AS(render_frame(roster, scenes, {99}, 0, 1), ValidationError);
    CHECK_THROWS_AS(render_frame(roster, scenes, {0}, 99, 1), ValidationError);
}

TEST_CASE("roster sizes per profile") {
    CHECK(roster_for_profile("pororo").size() == 9);
    CHECK(roster_for_profile("flintstones").size() == 7);
    CHECK_THROWS_AS(roster_for_profile("simpsons"), ValidationError);
}

TEST_CASE("character and scene oracles are exact on generated frames") {
    auto m = generate_manifest(small_params());
    for (int i = 0; i < 10; ++i) {
        auto rec = generate_story(m, "train", i);
        for (const auto& fr : rec.frames) {
            CHECK(oracle_detect_characters(fr.image, m.roster) == fr.characters);
            CHECK(oracle_detect_scene(fr.image, m.scenes) == fr.scene_id);
        }
    }
}

TEST_CASE("story structure postconditions") {
    auto m = generate_manifest(small_params(21));
    for (const auto& split : {"train", "valid", "test"}) {
        int n = int(m.split_ids(split).size());
        for (int i = 0; i < n; ++i) {
            auto rec = generate_story(m, split, i);
            REQUIRE(rec.frames.size() == 5);

            // at least one non-adjacent same-scene pair
            bool repeat = false;
            for (size_t a = 0; a < rec.frames.size(); ++a)
                for (size_t b = a + 2; b < rec.frames.size(); ++b)
                    if (rec.frames[a].scene_id == rec.frames[b].scene_id) repeat = true;
            CHECK(repeat);

            // at least one scene that appears nowhere else in the story
            bool unique = false;
            for (size_t a = 0; a < rec.frames.size(); ++a) {
                int cnt = 0;
                for (const auto& fr : rec.frames)
                    if (fr.scene_id == rec.frames[a].scene_id) ++cnt;
                if (cnt == 1) unique = true;
            }
            CHECK(unique);

            // 2-3 distinct scenes
            std::set<int> distinct;
            for (const auto& fr : rec.frames) distinct.insert(fr.scene_id);
            CHECK(distinct.size() >= 2);
            CHECK(distinct.size() <= 3);

            for (const auto& fr : rec.frames) {
                CHECK(!fr.characters.empty());
                CHECK(fr.characters.size() <= 3);
                auto toks = tokenize(fr.prompt);
                CHECK(toks.size() >= 6);
                CHECK(toks.size() <= 14);
            }
        }
    }
}

TEST_CASE("history dependency fraction >= 60% per split") {
    auto m = generate_manifest(small_params(33));
    for (const auto& split : {"train", "valid", "test"})
        CHECK(history_dependency_fraction(m, split) >= 0.6);
}

TEST_CASE("same-seed dataset materialization is byte-identical") {
    auto m = generate_manifest(small_params(7));
    std::string d1 = "/tmp/storydiff_test_ds1";
    std::string d2 = "/tmp/storydiff_test_ds2";
    fs::remove_all(d1);
    fs::remove_all(d2);
    materialize_dataset(m, d1);
    materialize_dataset(m, d2);
    CHECK(dir_hash(d1) == dir_hash(d2));

    // different seed actually changes the data
    auto m3 = generate_manifest(small_params(8));
    std::string d3 = "/tmp/storydiff_test_ds3";
    fs::remove_all(d3);
    materialize_dataset(m3, d3);
    CHECK(dir_hash(d1) != dir_hash(d3));
    fs::remove_all(d1);
    fs::remove_all(d2);
    fs::remove_all(d3);
}

TEST_CASE("full-scale profile reproduces published split sizes") {
    DatasetParams p;
    p.n_train = 10191;
    p.n_valid = 2334;
    p.n_test = 2208;
    auto m = generate_manifest(p);
    CHECK(m.split_ids("train").size() == 10191);
    CHECK(m.split_ids("valid").size() == 2334);
    CHECK(m.split_ids("test").size() == 2208);
    // ids are disjoint by construction
    std::set<std::string> all;
    for (const auto& split : {"train", "valid", "test"})
        for (const auto& id : m.split_ids(split)) CHECK(all.insert(id).second);
}

TEST_CASE("story save/load round trip") {
    auto m = generate_manifest(small_params());
    auto rec = generate_story(m, "valid", 2);
    std::string dir = "/tmp/storydiff_test_story";
    fs::remove_all(dir);
    save_story(rec, dir);
    auto back = load_story(dir);
    CHECK(back.story_id == rec.story_id);
    REQUIRE(back.frames.size() == rec.frames.size());
    for (size_t k = 0; k < rec.frames.size(); ++k) {
        CHECK(back.frames[k].prompt == rec.frames[k].prompt);
        CHECK(back.frames[k].characters == rec.frames[k].characters);
        CHECK(back.frames[k].scene_id == rec.frames[k].scene_id);
        CHECK(back.frames[k].pose_seed == rec.frames[k].pose_seed);
        CHECK(back.frames[k].image == rec.frames[k].image);
    }
    fs::remove_all(dir);
}

TEST_CASE("load errors name the offending frame") {
    auto m = generate_manifest(small_params());
    auto rec = generate_story(m, "test", 1);
    std::string dir = "/tmp/storydiff_test_broken";
    fs::remove_all(dir);
    save_story(rec, dir);

    // truncate frame 3
    {
        std::ifstream in(dir + "/frames/3.png", std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
        std::ofstream out(dir + "/frames/3.png", std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), std::streamsize(bytes.size() / 3));
    }
    try {
        load_story(dir);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("frame 3") != std::string::npos);
    }

    // missing frame file
    fs::remove(dir + "/frames/3.png");
    try {
        load_story(dir);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("3") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("single-frame stories are rejected") {
    auto m = generate_manifest(small_params());
    auto rec = generate_story(m, "test", 0);
    rec.frames.resize(1);
    CHECK_THROWS_AS(save_story(rec, "/tmp/storydiff_test_l1"), ValidationError);

    // hand-written single-frame story.json is rejected on load
    std::string dir = "/tmp/storydiff_test_l1b";
    fs::remove_all(dir);
    fs::create_directories(dir + "/frames");
    std::ofstream f(dir + "/story.json");
    f << R"({"story_id":"x","frames":[{"prompt":"pororo is waving in the forest",)"
      << R"("characters":[0],"scene_id":1,"pose_seed":"0","png_crc32":0}]})";
    f.close();
    CHECK_THROWS(load_story(dir));
    fs::remove_all(dir);
}

TEST_CASE("tokenizer and vocabulary") {
    CHECK(vocabulary()[0] == "<pad>");
    auto ids = tokenize("pororo and crong are playing in the beach");
    CHECK(ids.size() == 8);
    for (int id : ids) CHECK(id > 0);
    CHECK_THROWS_AS(tokenize("pororo visits the moon"), ValidationError);
    CHECK(vocabulary_hash() == vocabulary_hash());
    // every generated prompt tokenizes
    auto m = generate_manifest(small_params(99));
    for (int i = 0; i < 12; ++i) {
        auto rec = generate_story(m, "train", i);
        for (const auto& fr : rec.frames) CHECK_NOTHROW(tokenize(fr.prompt));
    }
}

TEST_CASE("manifest save/load round trip") {
    auto m = generate_manifest(small_params(55));
    std::string dir = "/tmp/storydiff_test_manifest";
    fs::remove_all(dir);
    save_manifest(m, dir);
    auto back = load_manifest(dir);
    CHECK(back.params.seed == m.params.seed);
    CHECK(back.params.profile == m.params.profile);
    CHECK(back.splits == m.splits);
    CHECK(back.roster.size() == m.roster.size());
    CHECK(back.scenes.size() == m.scenes.size());
    fs::remove_all(dir);
}
