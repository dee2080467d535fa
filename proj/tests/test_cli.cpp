#include <doctest.h>

#include <sstream>

#include "helpers.hpp"
#include "solens/cli.hpp"
#include "solens/config.hpp"
#include "solens/errors.hpp"
#include "solens/exports.hpp"
#include "solens/pipeline.hpp"
#include "solens/applications.hpp"
#include "solens/eval_harness.hpp"

using namespace solens;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = dispatch(args, out, err);
    return {code, out.str(), err.str()};
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

void pipeline(const fs::path& cfg, const std::vector<std::string>& extra = {}) {
    for (const char* stage : {"trace", "effects", "rank1", "decompose", "ablate", "spurious", "discover", "segment",
                              "metrics"}) {
        std::vector<std::string> args{stage, "--config", cfg.string()};
        args.insert(args.end(), extra.begin(), extra.end());
        const Run r = run(args);
        CAPTURE(stage);
        CAPTURE(r.err);
        REQUIRE(r.code == 0);
    }
}

}  // namespace

TEST_CASE("config defaults, strictness and errors") {
    const RunConfig c = parse_config("{}");
    CHECK(c.m == 128);
    CHECK(c.support_size == 128);
    CHECK(c.k == 100);
    CHECK(c.Q == 100);
    CHECK(c.threshold == 0.5);
    CHECK(c.layers == std::vector<int>{8, 9, 10});
    CHECK_THROWS_AS(parse_config(R"({"m": 4, "n": 5})"), ValidationError);
    try {
        parse_config("{\n  \"m\": 4,\n  oops\n}");
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        const std::string what = e.what();
        CHECK(what.find("line 3") != std::string::npos);
        CHECK(what.find("column") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config(R"({"m": "many"})"), ValidationError);
    RunConfig bad;
    bad.threshold = 2.0;
    CHECK_THROWS_AS(bad.validate(), ValidationError);

    const RunConfig rel = parse_config(R"({"weights": "w", "output": "/abs/out"})", "/base");
    CHECK(rel.weights == fs::path("/base/w"));
    CHECK(rel.output == fs::path("/abs/out"));
    const RunConfig back = config_from_json(config_to_json(rel));
    CHECK(back.weights == rel.weights);
    CHECK(back.m == rel.m);
}

TEST_CASE("exit codes and diagnostics") {
    testing::TempDir dir("cli_errors");
    CHECK(run({}).code == 1);
    CHECK(run({"frobnicate"}).code == 1);
    CHECK(run({"--help"}).code == 0);
    CHECK(run({"trace", "--config", (dir / "missing.json").string()}).code == 2);
    std::ofstream(dir / "bad.json") << "{\n \"m\": 3,\n]";
    const Run bad = run({"trace", "--config", (dir / "bad.json").string()});
    CHECK(bad.code == 1);
    CHECK(bad.err.find("line") != std::string::npos);
    std::ofstream(dir / "unknown.json") << R"({"mm": 3})";
    CHECK(run({"trace", "--config", (dir / "unknown.json").string()}).code == 1);
    std::ofstream(dir / "ok.json") << R"({"weights": "nowhere", "images": "nowhere"})";
    const Run missing = run({"trace", "--config", (dir / "ok.json").string()});
    CHECK(missing.code == 2);
    CHECK_FALSE(missing.err.empty());
    CHECK(run({"gen-toy"}).code == 1);
    CHECK(run({"ablate", "--config", (dir / "ok.json").string(), "--mode", "sideways"}).code == 1);
}

TEST_CASE("gen-toy is deterministic and refuses to overwrite") {
    testing::TempDir dir("gen");
    REQUIRE(run({"gen-toy", "--seed", "42", "--out", (dir / "a").string()}).code == 0);
    REQUIRE(run({"gen-toy", "--seed", "42", "--out", (dir / "b").string()}).code == 0);
    REQUIRE(run({"gen-toy", "--seed", "7", "--out", (dir / "c").string()}).code == 0);
    CHECK(testing::directory_digest(dir / "a") == testing::directory_digest(dir / "b"));
    CHECK(testing::directory_digest(dir / "a") != testing::directory_digest(dir / "c"));
    CHECK(run({"gen-toy", "--seed", "42", "--out", (dir / "a").string()}).code == 1);
    CHECK(run({"gen-toy", "--seed", "42", "--out", (dir / "a").string(), "--force"}).code == 0);
    CHECK(testing::directory_digest(dir / "a") == testing::directory_digest(dir / "b"));
}

TEST_CASE("toy pipeline through the CLI") {
    testing::TempDir dir("pipe");
    REQUIRE(run({"gen-toy", "--seed", "42", "--out", dir.path().string()}).code == 0);
    const fs::path cfg = dir / "config.json";
    pipeline(cfg);
    const RunConfig c = load_config(cfg);

    SUBCASE("ablate writes one row per layer") {
        const Run r = run({"ablate", "--config", cfg.string(), "--mode", "all", "--layers", "2", "--force"});
        REQUIRE(r.code == 0);
        const std::string csv = read_text_file(c.output / "ablation_all.csv");
        CHECK(count_lines(csv) == 2);
        CHECK(csv.rfind("layer,mode,baseline_acc,ablated_acc,n_images,n_neurons\n2,all,", 0) == 0);
        for (const char* mode : {"small_norm", "large_norm_topQ", "pc1_reconstruction", "indirect", "first_order_msa"}) {
            CAPTURE(mode);
            CHECK(run({"ablate", "--config", cfg.string(), "--mode", mode}).code == 0);
            CHECK(count_lines(read_text_file(c.output / (std::string("ablation_") + mode + ".csv"))) == 3);
        }
    }
    SUBCASE("command-line flags win over the file") {
        REQUIRE(c.m == 8);
        REQUIRE(run({"decompose", "--config", cfg.string(), "--m", "3", "--force"}).code == 0);
        for (const auto& code : codes_from_jsonl(read_text_file(paths::codes(c, c.layers[0]))))
            CHECK(code.indices.size() == 3);
    }
    SUBCASE("outputs are never overwritten without --force") {
        const Run r = run({"rank1", "--config", cfg.string()});
        CHECK(r.code == 1);
        CHECK(r.err.find("--force") != std::string::npos);
    }
    SUBCASE("stage outputs exist") {
        CHECK(fs::exists(paths::metrics(c)));
        CHECK(fs::exists(paths::spurious(c)));
        CHECK(fs::exists(paths::discover(c, 0)));
        CHECK(fs::exists(paths::segment(c) / "pgm" / "image_0_mask.pgm"));
        const auto metrics = nlohmann::json::parse(read_text_file(paths::metrics(c)));
        for (const char* key : {"pixel_acc", "miou", "map"}) {
            CHECK(metrics.at(key).get<double>() >= 0.0);
            CHECK(metrics.at(key).get<double>() <= 100.0);
        }
    }
}

TEST_CASE("CLI discover output equals a direct library run") {
    testing::TempDir dir("equiv");
    REQUIRE(run({"gen-toy", "--seed", "42", "--out", dir.path().string()}).code == 0);
    const fs::path cfg = dir / "config.json";
    for (const char* stage : {"trace", "effects", "rank1", "decompose", "discover"})
        REQUIRE(run({stage, "--config", cfg.string()}).code == 0);

    const RunConfig c = load_config(cfg);
    const Container wc = read_container(c.weights);
    const WeightBundle w = WeightBundle::from_tensors(wc.tensors, wc.manifest.attributes.at("model_spec").get<ModelSpec>());
    const Container ic = read_container(c.images), rc = read_container(c.reference_images);
    const auto eval = trace_images(w, ic.at(*ic.find_role("images.pixels")));
    const auto ref = trace_images(w, rc.at(*rc.find_role("images.pixels")));
    const TextPool pool = pool_from_container(read_container(c.pool));
    std::vector<SecondOrderField> fields;
    std::vector<PercentileTable> tables;
    std::vector<SparseCode> codes;
    for (int layer : c.layers) {
        const auto ref_field = second_order(w, ref, layer);
        Rank1Options o;
        o.support_size = c.support_size;
        const auto dirs = fit_layer(ref_field, o);
        for (auto& code : decompose_layer(dirs, pool, c.m)) codes.push_back(std::move(code));
        tables.push_back(percentile_table(ref_field, c.percentile));
        fields.push_back(second_order(w, eval, layer));
    }
    // Codes pass through their JSON form in the CLI run.
    codes = codes_from_jsonl(codes_jsonl(codes));
    for (int image = 0; image < fields[0].n_images; ++image) {
        const auto ranking = discover_concepts(fields, tables, codes, image, c.discover_top);
        CHECK(ranking_jsonl(ranking, pool.phrases) == read_text_file(paths::discover(c, image)));
    }
}

TEST_CASE("pipeline results do not depend on --jobs") {
    testing::TempDir dir("jobs");
    REQUIRE(run({"gen-toy", "--seed", "42", "--out", dir.path().string()}).code == 0);
    const fs::path cfg = dir / "config.json";
    pipeline(cfg, {"--jobs", "1", "--out", (dir / "one").string()});
    pipeline(cfg, {"--jobs", "4", "--out", (dir / "four").string()});
    CHECK(testing::directory_digest(dir / "one") == testing::directory_digest(dir / "four"));
}

TEST_CASE("exports") {
    PhraseRanking r;
    r.entries = {{1, 2.5}, {0, -0.5}};
    CHECK(ranking_jsonl(r, {"dog", "grass"}) ==
          "{\"phrase\":\"grass\",\"score\":2.5,\"sign\":\"+\"}\n{\"phrase\":\"dog\",\"score\":-0.5,\"sign\":\"-\"}\n");
    SparseCode code;
    code.layer = 9;
    code.neuron = 3;
    code.indices = {4, 1};
    code.gamma = {0.25, -1.0};
    code.residual_norm = 0.125;
    const auto back = codes_from_jsonl(codes_jsonl(std::span(&code, 1)));
    REQUIRE(back.size() == 1);
    CHECK(back[0].indices == code.indices);
    CHECK(back[0].gamma == code.gamma);
    CHECK(back[0].neuron == 3);
    CHECK(back[0].residual_norm == 0.125);

    const std::vector<float> gray{0.0f, 1.0f, 0.5f, 2.0f};
    CHECK(pgm_gray(gray, 2, 2) == std::string("P5\n2 2\n255\n") + std::string("\x00\xff\x80\xff", 4));
    const std::vector<std::uint8_t> mask{0, 1, 1, 0};
    CHECK(pgm_mask(mask, 4, 1) == std::string("P5\n4 1\n1\n") + std::string("\x00\x01\x01\x00", 4));

    testing::TempDir dir("text");
    write_text_file(dir / "a" / "b.txt", "x", false);
    CHECK_THROWS_AS(write_text_file(dir / "a" / "b.txt", "y", false), ValidationError);
    write_text_file(dir / "a" / "b.txt", "y", true);
    CHECK(read_text_file(dir / "a" / "b.txt") == "y");
    CHECK_THROWS_AS(read_text_file(dir / "none"), IoError);
}
