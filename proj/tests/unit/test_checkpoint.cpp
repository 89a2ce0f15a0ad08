#include <doctest.h>

#include <fstream>

#include <json.hpp>

#include "probe.hpp"
#include "prosona/checkpoint.hpp"
#include "prosona/image_io.hpp"
#include "temp_dir.hpp"

using namespace prosona;

TEST_SUITE("checkpoint") {
  TEST_CASE("save and load round trip") {
    testutil::TempDir dir("ckpt");
    auto m = testutil::probe_model(3);
    m.set_stage(2);
    const auto meta = ckpt::save(m, dir / "c", 3, "parent123", 0.25, 7);
    CHECK(meta.checkpoint_id == meta.params_sha256.substr(0, 16));
    CHECK(meta.params_sha256 == ckpt::params_sha256(m));

    ckpt::Metadata back;
    const auto loaded = ckpt::load(dir / "c", &back);
    CHECK(loaded.stage() == 2);
    CHECK(loaded.arch() == m.arch());
    CHECK(std::equal(loaded.params().values().begin(), loaded.params().values().end(), m.params().values().begin()));
    CHECK(back.checkpoint_id == meta.checkpoint_id);
    CHECK(back.parent_id == "parent123");
    CHECK(back.seed == 3);
    CHECK(back.epoch == 7);
    CHECK(back.val_ged == 0.25);

    const auto j = nlohmann::json::parse(io::read_text(dir / "c" / "checkpoint.json"));
    for (const char* key : {"format_version", "checkpoint_id", "stage", "architecture", "seed", "git_hash", "params_sha256"})
      CHECK(j.contains(key));
  }

  TEST_CASE("saving is byte-deterministic") {
    testutil::TempDir dir("ckpt_det");
    const auto m = testutil::probe_model(4);
    (void)ckpt::save(m, dir / "a", 4);
    (void)ckpt::save(m, dir / "b", 4);
    CHECK(io::sha256_file(dir / "a" / "params.bin") == io::sha256_file(dir / "b" / "params.bin"));
    CHECK(io::read_text(dir / "a" / "checkpoint.json") == io::read_text(dir / "b" / "checkpoint.json"));
  }

  TEST_CASE("corrupt and missing checkpoints") {
    testutil::TempDir dir("ckpt_bad");
    CHECK_THROWS_AS((void)ckpt::load(dir / "missing"), IoError);

    const auto m = testutil::probe_model(5);
    (void)ckpt::save(m, dir / "c", 5);
    {
      std::fstream f(dir / "c" / "params.bin", std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(16);
      f.put('\x7f');
    }
    CHECK_THROWS_AS((void)ckpt::load(dir / "c"), FormatError);

    (void)ckpt::save(m, dir / "d", 5);
    std::filesystem::resize_file(dir / "d" / "params.bin", 64);
    CHECK_THROWS_AS((void)ckpt::load(dir / "d"), FormatError);

    (void)ckpt::save(m, dir / "e", 5);
    io::write_bytes(dir / "e" / "checkpoint.json", "{not json");
    CHECK_THROWS_AS((void)ckpt::read_metadata(dir / "e"), FormatError);
  }
}
