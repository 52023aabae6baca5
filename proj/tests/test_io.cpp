#include <bit>
#include <cmath>
#include <filesystem>
#include <limits>

#include "doctest.h"
#include "motionmask/errors.hpp"
#include "motionmask/io.hpp"
#include "motionmask/pipeline.hpp"
#include "motionmask/workspace.hpp"

using namespace motionmask;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("motionmask_test_io_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

Tensor awkward_tensor() {
    Tensor t(3, 4);
    const double specials[] = {0.0, -0.0, 1e-308, 4.9e-324, std::numeric_limits<double>::max(), -1.0 / 3.0,
                               std::nextafter(1.0, 2.0), 12345.678901234567, -2.5e17, 0.1, 7.0, -7.25};
    std::copy(std::begin(specials), std::end(specials), t.flat().begin());
    return t;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        return false;
    }
    for (std::size_t i = 0; i < a.flat().size(); ++i) {
        if (std::bit_cast<std::uint64_t>(a.flat()[i]) != std::bit_cast<std::uint64_t>(b.flat()[i])) {
            return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("tensor files round-trip bit for bit") {
    const fs::path dir = fresh_dir("tensor");
    const Tensor t = awkward_tensor();
    const std::string path = (dir / "t.emtf").string();
    write_tensor_file(path, t);
    CHECK(bit_equal(read_tensor_file(path), t));
    CHECK(fs::file_size(path) == 16 + 12 * 8);
    const std::string bytes = read_file(path);
    CHECK(bytes.substr(0, 4) == "EMTF");
    // u32 rows = 3, little-endian.
    CHECK(bytes[8] == 3);
    CHECK(bytes[9] == 0);

    Rng rng(1);
    for (int i = 0; i < 50; ++i) {
        Tensor r(1 + rng.index(6), 1 + rng.index(6));
        for (double& v : r.flat()) {
            v = rng.normal() * std::pow(10.0, rng.uniform(-30.0, 30.0));
        }
        CHECK(bit_equal(decode_tensor(encode_tensor(r), "random"), r));
    }
    CHECK(decode_tensor(encode_tensor(Tensor(0, 5)), "empty").cols() == 5);
}

TEST_CASE("malformed tensor files are rejected") {
    std::string bytes = encode_tensor(awkward_tensor());
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_tensor(bad_magic, "x"), FormatError);
    std::string bad_version = bytes;
    bad_version[4] = 2;
    CHECK_THROWS_AS(decode_tensor(bad_version, "x"), FormatError);
    CHECK_THROWS_AS(decode_tensor(bytes.substr(0, bytes.size() - 1), "x"), FormatError);
    CHECK_THROWS_AS(decode_tensor(bytes + "z", "x"), FormatError);
    CHECK_THROWS_AS(read_tensor_file("/nonexistent/motionmask.emtf"), FormatError);
}

TEST_CASE("checkpoints round-trip bit for bit and check their version") {
    Checkpoint c;
    c.stage = "mam";
    c.config = profile_config("toy").to_text();
    c.rng = RngState{0xdeadbeefcafef00dULL, 42};
    c.tensors.emplace_back("a/w", awkward_tensor());
    c.tensors.emplace_back("b", Tensor(1, 1));
    const std::string bytes = encode_checkpoint(c);
    const Checkpoint back = decode_checkpoint(bytes, "mem");
    CHECK(back.stage == c.stage);
    CHECK(back.config == c.config);
    CHECK(back.rng == c.rng);
    REQUIRE(back.tensors.size() == 2);
    CHECK(back.tensors[0].first == "a/w");
    CHECK(bit_equal(back.tensor("a/w"), c.tensor("a/w")));
    CHECK(encode_checkpoint(back) == bytes);
    CHECK_THROWS_AS(back.tensor("missing"), FormatError);

    std::string future = bytes;
    future[4] = 9;
    CHECK_THROWS_AS(decode_checkpoint(future, "mem"), FormatError);
    CHECK_THROWS_AS(decode_checkpoint(encode_tensor(Tensor(1, 1)), "mem"), FormatError);
}

TEST_CASE("parameter tables restore only matching shapes") {
    ParamSet p;
    p.add("w", awkward_tensor());
    Checkpoint c;
    add_params(c, p, "x/");
    ParamSet q;
    q.add("w", Tensor(3, 4));
    restore_params(c, q, "x/");
    CHECK(bit_equal(q.value("w"), p.value("w")));
    ParamSet wrong;
    wrong.add("w", Tensor(4, 3));
    CHECK_THROWS_AS(restore_params(c, wrong, "x/"), FormatError);
}

TEST_CASE("config text round-trips and rejects unknown keys") {
    PipelineConfig c = profile_config("toy");
    c.set("mask.ema_decay", "0.995");
    c.set("synth.layout", "2,6,6,2");
    c.set("strategy", "loss");
    const PipelineConfig back = parse_config(c.to_text(), profile_config("paper"));
    CHECK(back.to_text() == c.to_text());
    CHECK(back.mask.ema_decay == 0.995);
    CHECK(back.synth.layout.widths[1] == 6);
    CHECK(back.strategy == MaskStrategy::Loss);

    CHECK_THROWS_AS(c.set("mask.unknown", "1"), ConfigError);
    CHECK_THROWS_AS(c.set("mask.epochs", "ten"), ConfigError);
    CHECK_THROWS_AS(c.set("mask.epochs", "-1"), ConfigError);
    CHECK_THROWS_AS(c.set("synth.layout", "1,2,3"), ConfigError);
    CHECK_THROWS_AS(parse_config("seed 3\n", c), ConfigError);
    CHECK_THROWS_AS(profile_config("huge"), ConfigError);

    const PipelineConfig commented = parse_config("# comment\n\n seed = 9 # trailing\n", c);
    CHECK(commented.seed == 9);
}

TEST_CASE("profiles carry their training budgets and derived widths") {
    const PipelineConfig toy = profile_config("toy");
    CHECK(toy.mask.epochs == 40);
    CHECK(toy.mask.batch == 16);
    toy.validate();
    const PipelineConfig paper = profile_config("paper");
    CHECK(paper.mask.epochs == 200);
    CHECK(paper.mask.batch == 64);
    CHECK(paper.mask.lr == 1e-4);
    CHECK(paper.mask.entries == paper.rvq.entries);
    paper.validate();

    PipelineConfig c = toy;
    c.set("rvq.dim", "12");
    CHECK(c.mam.latent_dim == 12);
    CHECK(c.mask.latent_dim == 12);
    c.set("mam.width", "16");
    CHECK(c.mask.speech_width == 16);
    c.set("synth.frames", "128");
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("gesture events survive their text form") {
    std::vector<GestureEvent> events{{3, 9, Part::Hands, 0.8123456789012345, 2}, {20, 12, Part::Face, 1.2, 0}};
    CHECK(parse_events(events_text(events)) == events);
    CHECK(parse_events("").empty());
    CHECK_THROWS_AS(parse_events("1:2:hands:1.0"), FormatError);
}

TEST_CASE("packed features split back into both tracks") {
    SpeechFeatures f{awkward_tensor().slice_cols(0, 1), awkward_tensor().slice_cols(1, 3)};
    const SpeechFeatures back = unpack_features(pack_features(f), 1);
    CHECK(bit_equal(back.low, f.low));
    CHECK(bit_equal(back.high, f.high));
    CHECK_THROWS_AS(unpack_features(Tensor(3, 2), 2), DimensionError);
}

TEST_CASE("optimizer settings are config keys") {
    PipelineConfig c = profile_config("toy");
    c.set("mask.beta2", "0.98");
    c.set("rvq.beta1", "0.5");
    CHECK(c.mask.beta2 == 0.98);
    CHECK(parse_config(c.to_text(), profile_config("toy")).rvq.beta1 == 0.5);
    c.set("mam.beta1", "1");
    CHECK_THROWS_AS(c.validate(), ConfigError);
}
