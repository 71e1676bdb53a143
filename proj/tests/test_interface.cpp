#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pcd/checkpoint.hpp"
#include "pcd/cli.hpp"
#include "pcd/config.hpp"

using namespace pcd;

namespace {

const std::string kTmp = "/tmp/pcd_test_interface";

struct TmpDir {
  TmpDir() {
    std::filesystem::remove_all(kTmp);
    std::filesystem::create_directories(kTmp);
  }
  ~TmpDir() { std::filesystem::remove_all(kTmp); }
};

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << content;
}

int cli(std::vector<std::string> args) {
  std::vector<const char*> argv = {"pcd"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST_CASE("checkpoint: save/load round trip is bit-exact") {
  TmpDir tmp;
  Checkpoint c;
  c.metadata = {{"format_version", 1}, {"model_kind", "test"}, {"head_kind", "none"}};
  RngStream rng(5);
  c.add("a.weight", Tensor::gaussian({3, 4}, rng));
  c.add("b.bias", Tensor::gaussian({7}, rng));
  c.add("c.kernel", Tensor::gaussian({2, 3, 1, 1}, rng));

  std::string p1 = kTmp + "/a.pcdckpt";
  save_checkpoint(c, p1);
  Checkpoint loaded = load_checkpoint(p1);
  CHECK(loaded.metadata == c.metadata);
  REQUIRE(loaded.entries.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(loaded.entries[i].path == c.entries[i].path);
    CHECK(loaded.entries[i].shape == c.entries[i].shape);
    for (size_t k = 0; k < c.entries[i].data.size(); ++k)
      CHECK(loaded.entries[i].data[k] == c.entries[i].data[k]);
  }

  // resaving produces identical bytes
  std::string p2 = kTmp + "/b.pcdckpt";
  save_checkpoint(loaded, p2);
  CHECK(read_file(p1) == read_file(p2));

  // duplicate paths rejected at add and save time
  CHECK_THROWS_WITH_AS(c.add("a.weight", Tensor::zeros({1})),
                       doctest::Contains("duplicate"), std::runtime_error);
}

TEST_CASE("checkpoint: empty entry list is a valid header-only file") {
  TmpDir tmp;
  Checkpoint c;
  c.metadata = {{"format_version", 1}};
  std::string p = kTmp + "/empty.pcdckpt";
  save_checkpoint(c, p);
  Checkpoint loaded = load_checkpoint(p);
  CHECK(loaded.entries.empty());
  CHECK(loaded.metadata.at("format_version") == 1);
}

TEST_CASE("checkpoint: distinct diagnostics for each corruption") {
  TmpDir tmp;
  Checkpoint c;
  c.metadata = {{"format_version", 1}};
  c.add("w", Tensor::ones({2, 2}));
  std::string p = kTmp + "/c.pcdckpt";
  save_checkpoint(c, p);
  std::string good = read_file(p);

  // bad magic
  std::string bad = good;
  bad[0] = 'X';
  write_file(p, bad);
  CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("bad magic"),
                       std::runtime_error);

  // truncation, at several cut points
  for (size_t cut : {good.size() - 1, good.size() - 9, size_t{10}}) {
    write_file(p, good.substr(0, cut));
    CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("truncated"),
                         std::runtime_error);
  }

  // unsupported dtype code: dtype byte follows the 4-byte magic, version,
  // metadata block, entry count, path length and path
  uint32_t meta_len = static_cast<uint32_t>(c.metadata.dump().size());
  size_t dtype_pos = 4 + 4 + 4 + meta_len + 4 + 2 + 1;
  bad = good;
  REQUIRE(bad[dtype_pos] == 0);
  bad[dtype_pos] = 3;
  write_file(p, bad);
  CHECK_THROWS_WITH_AS(load_checkpoint(p), doctest::Contains("dtype"),
                       std::runtime_error);

  // duplicate tensor path inside the file
  Checkpoint dup;
  dup.metadata = {{"format_version", 1}};
  dup.add("w", Tensor::ones({1}));
  dup.entries.push_back(dup.entries[0]);
  CHECK_THROWS_WITH_AS(save_checkpoint(dup, p), doctest::Contains("duplicate"),
                       std::runtime_error);

  CHECK_THROWS(load_checkpoint(kTmp + "/does_not_exist.pcdckpt"));
}

TEST_CASE("config: defaults flag gives the desk configuration") {
  TrainConfig cfg = parse_config_json({{"defaults", true}});
  CHECK(cfg == desk_default_config());
  CHECK(cfg.loss.tau == 0.2f);
  CHECK(cfg.optim.momentum == 0.9f);
  CHECK(cfg.optim.weight_decay == 1e-5f);
  CHECK(cfg.data.image_size == 32);
}

TEST_CASE("config: rejections carry the key path") {
  CHECK_THROWS_WITH_AS(
      parse_config_json({{"defaults", true}, {"loss", {{"tau", -1.0}}}}),
      doctest::Contains("loss.tau"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      parse_config_json({{"defaults", true}, {"loss", {{"tua", 0.2}}}}),
      doctest::Contains("loss.tua"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      parse_config_json({{"defaults", true}, {"optim", {{"batch_size", "many"}}}}),
      doctest::Contains("optim.batch_size"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config_json(nlohmann::json::object()),
                       doctest::Contains("missing required key"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      parse_config_json(
          {{"defaults", true}, {"optim", {{"epochs", 5}, {"warmup_epochs", 5.0}}}}),
      doctest::Contains("warmup_epochs"), std::invalid_argument);
}

TEST_CASE("config: canonical serialization round-trips to an equal config") {
  TrainConfig cfg = desk_default_config();
  cfg.seed = 77;
  cfg.loss.queue_capacity = 1234;
  cfg.model.student_backbone.stages = {{2, 24, 2}, {1, 48, 2}};
  nlohmann::json j = config_to_json(cfg);
  TrainConfig back = parse_config_json(j);  // strict mode: every key present
  CHECK(back == cfg);
  CHECK(config_to_json(back) == j);
}

TEST_CASE("config: shipped presets parse and carry the paper-scale values") {
  TrainConfig desk = parse_config_file("configs/desk.json");
  CHECK(desk == desk_default_config());

  TrainConfig paper = parse_config_file("configs/paper.json");
  CHECK(paper.loss.tau == 0.2f);
  CHECK(paper.loss.queue_capacity == 65536);
  CHECK(paper.optim.weight_decay == 1e-5f);
  CHECK(paper.optim.momentum == 0.9f);
  CHECK(paper.optim.batch_size == 1024);
  CHECK(paper.optim.epochs == 100);
  CHECK(paper.optim.warmup_epochs == 10.0);
  CHECK(paper.model.mhsa.heads == 8);
  CHECK(paper.model.mhsa.head_dim == 64);
  CHECK(paper.model.embed_dim == 256);
  CHECK(paper.model.teacher_head_hidden == 4096);
  // paper peak lr: 1.0 * 1024/256 = 4.0
  CHECK(paper.peak_lr() == 4.0f);
}

TEST_CASE("cli: full pipeline on a tiny config") {
  TmpDir tmp;
  nlohmann::json tiny = {
      {"defaults", true},
      {"seed", 3},
      {"data", {{"n_images", 12}, {"image_size", 16}}},
      {"model",
       {{"student_backbone", {{"stem_channels", 6}, {"stages", {{1, 8, 2}, {1, 12, 2}}}}},
        {"teacher_backbone", {{"stem_channels", 6}, {"stages", {{1, 8, 2}, {1, 12, 2}}}}},
        {"student_head_hidden", 12},
        {"teacher_head_hidden", 12},
        {"embed_dim", 6},
        {"mhsa", {{"enabled", true}, {"heads", 2}, {"head_dim", 3}}}}},
      {"loss", {{"queue_capacity", 32}}},
      {"optim", {{"batch_size", 4}, {"epochs", 4}, {"warmup_epochs", 0.5}, {"max_steps", 6}}}};
  std::string cfg_path = kTmp + "/tiny.json";
  write_file(cfg_path, tiny.dump(2));

  std::string data_dir = kTmp + "/data";
  CHECK(cli({"--config", cfg_path, "--out", data_dir, "gen-data"}) == 0);
  CHECK(std::filesystem::exists(data_dir + "/manifest.json"));

  std::string teacher = kTmp + "/teacher.pcdckpt";
  CHECK(cli({"--config", cfg_path, "--out", teacher, "pretrain-teacher", "--data",
             data_dir}) == 0);

  std::string adapted = kTmp + "/teacher_adapted.pcdckpt";
  CHECK(cli({"--out", adapted, "adapt-head", "--in", teacher, "--drop-last-bn"}) == 0);

  // adapting an already adapted checkpoint fails with exit 1
  CHECK(cli({"--out", kTmp + "/again.pcdckpt", "adapt-head", "--in", adapted}) == 1);

  std::string run_dir = kTmp + "/run";
  CHECK(cli({"--config", cfg_path, "--out", run_dir, "distill", "--data", data_dir,
             "--teacher", teacher, "--level", "pixel"}) == 0);
  CHECK(std::filesystem::exists(run_dir + "/metrics.tsv"));
  CHECK(std::filesystem::exists(run_dir + "/student_raw.pcdckpt"));
  CHECK(std::filesystem::exists(run_dir + "/student_export.pcdckpt"));

  // distilling against the pre-adapted (map-kind) checkpoint also works
  std::string run_dir2 = kTmp + "/run2";
  CHECK(cli({"--config", cfg_path, "--out", run_dir2, "distill", "--data", data_dir,
             "--teacher", adapted, "--level", "image"}) == 0);

  std::string exported = kTmp + "/backbone.pcdckpt";
  CHECK(cli({"--out", exported, "export", "--in", run_dir + "/student_raw.pcdckpt",
             "--anchor", "0.25"}) == 0);
  Checkpoint exp = load_checkpoint(exported);
  CHECK(exp.metadata.at("model_kind") == "backbone");
  CHECK(exp.metadata.at("norm_rescale_anchor").get<float>() == 0.25f);

  std::string heat = kTmp + "/erf.pgm";
  CHECK(cli({"--config", cfg_path, "--out", heat, "erf", "--ckpt", exported,
             "--samples", "4"}) == 0);
  CHECK(read_file(heat).substr(0, 3) == "P5\n");
  std::string heat_csv = kTmp + "/erf.csv";
  CHECK(cli({"--config", cfg_path, "--out", heat_csv, "erf", "--ckpt",
             run_dir + "/student_raw.pcdckpt", "--probe", "student", "--format", "csv",
             "--samples", "2"}) == 0);
  CHECK(!read_file(heat_csv).empty());

  // determinism: rerunning the same distill gives byte-identical outputs
  std::string run_dir3 = kTmp + "/run3";
  CHECK(cli({"--config", cfg_path, "--out", run_dir3, "distill", "--data", data_dir,
             "--teacher", teacher, "--level", "pixel"}) == 0);
  CHECK(read_file(run_dir + "/student_raw.pcdckpt") ==
        read_file(run_dir3 + "/student_raw.pcdckpt"));
  CHECK(read_file(run_dir + "/metrics.tsv") == read_file(run_dir3 + "/metrics.tsv"));
}

TEST_CASE("cli: exit codes") {
  CHECK(cli({"--help"}) == 0);
  CHECK(cli({"definitely-not-a-command"}) == 2);
  CHECK(cli({"adapt-head"}) == 2);                       // missing required --in
  CHECK(cli({"export", "--in", "/nope.pcdckpt", "--out", "/tmp/x"}) == 1);
  CHECK(cli({"verify", "--seed", "5"}) == 0);
}
