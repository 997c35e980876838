#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <p3d/cli.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code;
  std::string output;  // stdout + stderr
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  REQUIRE(is.good());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// every invocation goes through the real binary so flag parsing, exit codes
// and file outputs are all exercised end to end
RunResult run_cli(const std::string& args, const fs::path& scratch) {
  const fs::path log = scratch / "last_run.log";
  const std::string cmd =
      std::string(P3D_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.output = slurp(log);
  return r;
}

fs::path fresh_scratch(const std::string& name) {
  const fs::path dir = fs::path("cli_scratch") / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// micro settings: canonical 40-joint skeleton, one channel per joint
void write_micro_config(const fs::path& path, const fs::path& manifest, int epochs,
                        const std::string& extra_model = "") {
  std::ofstream os(path);
  os << "[model]\n"
     << "frames = 8\n"
     << "joint_dim = 1\n"
     << "expr_multiplier = 1\n"
     << "pairs = 1\n"
     << "heads = 1\n"
     << "ffn_dim = 4\n"
     << "dropout = 0.1\n"
     << "num_classes = 3\n"
     << extra_model
     << "\n[train]\n"
     << "lr = 0.002\n"
     << "batch_size = 4\n"
     << "epochs = " << epochs << "\n"
     << "seed = 7\n"
     << "\n[data]\n"
     << "manifest = " << manifest.string() << "\n"
     << "num_classes = 3\n"
     << "samples_per_class = 4\n"
     << "test_samples_per_class = 2\n"
     << "frames_per_video = 12\n"
     << "seed = 11\n";
}

}  // namespace

TEST_CASE("config parsing round-trips and rejects bad input") {
  const fs::path dir = fresh_scratch("config");
  write_micro_config(dir / "run.cfg", dir / "data" / "manifest.json", 2);
  p3d::RunConfig cfg = p3d::load_run_config((dir / "run.cfg").string());
  CHECK(cfg.model.frames == 8);
  CHECK(cfg.model.num_classes == 3);
  CHECK(cfg.train.epochs == 2);
  CHECK(cfg.train.seed == 7);
  CHECK(cfg.synth.num_classes == 3);
  CHECK(cfg.model.reps.expression);  // face part present

  // a dump reloads to an identical dump
  std::ostringstream d1;
  p3d::dump_run_config(cfg, d1);
  std::istringstream is(d1.str());
  p3d::RunConfig cfg2 = p3d::parse_run_config(is, "dump");
  std::ostringstream d2;
  p3d::dump_run_config(cfg2, d2);
  CHECK(d1.str() == d2.str());

  auto parse_str = [](const std::string& text) {
    std::istringstream s(text);
    return p3d::parse_run_config(s, "inline");
  };
  CHECK_THROWS_WITH_AS(parse_str("[model]\nfrobnicate = 3\n"),
                       doctest::Contains("frobnicate"), std::invalid_argument);
  CHECK_THROWS_AS(parse_str("[rocket]\nfuel = 3\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_str("frames = 8\n"), std::invalid_argument);        // no section
  CHECK_THROWS_AS(parse_str("[model]\nframes 8\n"), std::invalid_argument); // no '='
  CHECK_THROWS_AS(parse_str("[model]\nframes = eight\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_str("[model]\ndropout = 0.3x\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_str("[model]\nparts = body,plume\n"), std::invalid_argument);
  CHECK_THROWS_AS(parse_str("[train]\nseed = -4\n"), std::invalid_argument);

  // comments and omitted keys keep defaults
  p3d::RunConfig c3 = parse_str("# comment\n[train]\nlr = 0.01 ; inline\n");
  CHECK(c3.train.lr == doctest::Approx(0.01));
  CHECK(c3.train.batch_size == 512);
  CHECK(c3.model.frames == 32);

  // parts list drives the expression flag
  p3d::RunConfig c4 = parse_str("[model]\nparts = body,left_hand,right_hand\n");
  CHECK_FALSE(c4.model.reps.expression);
  CHECK(c4.model.layout.parts.size() == 3);
}

TEST_CASE("synth builds a loadable dataset") {
  const fs::path dir = fresh_scratch("synth");
  write_micro_config(dir / "run.cfg", dir / "data" / "manifest.json", 2);
  auto r = run_cli("synth --config " + (dir / "run.cfg").string() + " --out " +
                       (dir / "data").string(),
                   dir);
  CHECK(r.exit_code == 0);
  INFO(r.output);
  CHECK(fs::exists(dir / "data" / "manifest.json"));
  p3d::Dataset data = p3d::Dataset::load((dir / "data" / "manifest.json").string());
  CHECK(data.num_classes() == 3);
  CHECK(data.split("train").size() == 12);
  CHECK(data.split("test").size() == 6);
}

TEST_CASE("train twice with one seed gives identical history, eval scores the checkpoint") {
  const fs::path dir = fresh_scratch("train");
  const fs::path manifest = dir / "data" / "manifest.json";
  write_micro_config(dir / "run.cfg", manifest, 2);
  REQUIRE(run_cli("synth --config " + (dir / "run.cfg").string() + " --out " +
                      (dir / "data").string(),
                  dir)
              .exit_code == 0);

  const std::string base = "train --config " + (dir / "run.cfg").string();
  auto r1 = run_cli(base + " --seed 7 --out " + (dir / "run1").string(), dir);
  INFO(r1.output);
  REQUIRE(r1.exit_code == 0);
  auto r2 = run_cli(base + " --seed 7 --out " + (dir / "run2").string(), dir);
  REQUIRE(r2.exit_code == 0);

  const std::string h1 = slurp(dir / "run1" / "history.txt");
  CHECK(h1 == slurp(dir / "run2" / "history.txt"));
  CHECK(h1.find("epoch 0 ") != std::string::npos);
  CHECK(h1.find("epoch 1 ") != std::string::npos);
  CHECK(fs::exists(dir / "run1" / "model.ckpt"));

  // a different seed must change the trajectory
  auto r3 = run_cli(base + " --seed 8 --out " + (dir / "run3").string(), dir);
  REQUIRE(r3.exit_code == 0);
  CHECK(h1 != slurp(dir / "run3" / "history.txt"));

  // the dumped effective config reproduces the run without flags
  auto r4 = run_cli("train --config " + (dir / "run1" / "effective.cfg").string() + " --out " +
                        (dir / "run4").string(),
                    dir);
  INFO(r4.output);
  REQUIRE(r4.exit_code == 0);
  CHECK(h1 == slurp(dir / "run4" / "history.txt"));

  auto re = run_cli("eval --config " + (dir / "run.cfg").string() + " --checkpoint " +
                        (dir / "run1" / "model.ckpt").string() + " --split test --out " +
                        (dir / "eval1").string(),
                    dir);
  INFO(re.output);
  CHECK(re.exit_code == 0);
  CHECK(re.output.find("per-instance") != std::string::npos);
  CHECK(re.output.find("per-class") != std::string::npos);
  const auto mj = nlohmann::json::parse(slurp(dir / "eval1" / "metrics.json"));
  CHECK(mj.at("split") == "test");
  const double top1 = mj.at("per_instance").at("top1").get<double>();
  const double top5 = mj.at("per_instance").at("top5").get<double>();
  CHECK(top1 >= 0.0);
  CHECK(top1 <= 1.0);
  CHECK(top5 >= top1);
  CHECK(mj.at("samples") == 6);

  // eval on a split with no samples fails with a reason
  auto rv = run_cli("eval --config " + (dir / "run.cfg").string() + " --checkpoint " +
                        (dir / "run1" / "model.ckpt").string() + " --split val --out " +
                        (dir / "eval2").string(),
                    dir);
  CHECK(rv.exit_code != 0);
  CHECK(rv.output.find("error:") != std::string::npos);
}

TEST_CASE("train resumes from a checkpoint") {
  const fs::path dir = fresh_scratch("resume");
  const fs::path manifest = dir / "data" / "manifest.json";
  write_micro_config(dir / "full.cfg", manifest, 4);
  write_micro_config(dir / "half.cfg", manifest, 2);
  REQUIRE(run_cli("synth --config " + (dir / "full.cfg").string() + " --out " +
                      (dir / "data").string(),
                  dir)
              .exit_code == 0);

  REQUIRE(run_cli("train --config " + (dir / "full.cfg").string() + " --out " +
                      (dir / "full").string(),
                  dir)
              .exit_code == 0);
  REQUIRE(run_cli("train --config " + (dir / "half.cfg").string() + " --out " +
                      (dir / "half").string(),
                  dir)
              .exit_code == 0);
  auto rr = run_cli("train --config " + (dir / "full.cfg").string() + " --checkpoint " +
                        (dir / "half" / "model.ckpt").string() + " --out " +
                        (dir / "rest").string(),
                    dir);
  INFO(rr.output);
  REQUIRE(rr.exit_code == 0);
  CHECK(rr.output.find("resuming from epoch 2") != std::string::npos);

  // epochs 2..3 of the resumed run must match the tail of the straight run
  std::istringstream full(slurp(dir / "full" / "history.txt"));
  std::string line, tail;
  std::vector<std::string> full_lines;
  while (std::getline(full, line)) full_lines.push_back(line);
  REQUIRE(full_lines.size() == 4);
  const std::string rest = slurp(dir / "rest" / "history.txt");
  CHECK(rest == full_lines[2] + "\n" + full_lines[3] + "\n");
}

TEST_CASE("preprocess converts raw channel files into aligned sequences") {
  const fs::path dir = fresh_scratch("preprocess");
  const fs::path raw = dir / "raw";
  fs::create_directories(raw);

  // two glosses, three clips; 40 canonical joints, 4 expression channels
  auto write_raw = [&](const std::string& name, const std::string& gloss,
                       const std::string& split, double shift) {
    nlohmann::json j;
    j["gloss"] = gloss;
    j["split"] = split;
    j["root"] = {0.2 + shift, -0.1, 0.4};
    j["frames"] = nlohmann::json::array();
    for (int t = 0; t < 3; ++t) {
      nlohmann::json f;
      for (int k = 0; k < 40; ++k) {
        f["pos2d"].push_back({100.0 + 3 * k + t + shift, 50.0 + 2 * k});
        f["pos3d"].push_back({0.2 + shift + 0.01 * k, -0.1 + 0.02 * t, 0.4 + 0.005 * k});
        f["axis_angle"].push_back({0.1 * t, 0.2, 0.05 * k});
      }
      f["expression"] = {0.1, 0.2 + 0.1 * t, -0.3, 0.05};
      j["frames"].push_back(f);
    }
    std::ofstream os(raw / name);
    os << j.dump();
  };
  write_raw("clip_a.json", "hello", "train", 0.0);
  write_raw("clip_b.json", "world", "train", 0.3);
  write_raw("clip_c.json", "hello", "test", 0.1);

  auto r = run_cli("preprocess --input " + raw.string() + " --out " + (dir / "ds").string(), dir);
  INFO(r.output);
  REQUIRE(r.exit_code == 0);

  p3d::Dataset data = p3d::Dataset::load((dir / "ds" / "manifest.json").string());
  CHECK(data.num_classes() == 2);
  CHECK(data.manifest().classes == std::vector<std::string>{"hello", "world"});
  REQUIRE(data.split("train").size() == 2);
  REQUIRE(data.split("test").size() == 1);
  CHECK(data.split("test")[0]->label == 0);  // "hello"

  const p3d::PoseSequence& seq = data.sequence(*data.split("test")[0]);
  CHECK(seq.layout.expression_width == 4);
  REQUIRE(seq.num_frames() == 3);
  // 2D in the unit square, frame-0 pelvis at the 3D origin
  for (const auto& f : seq.frames)
    for (const auto& p : f.pos2d) {
      CHECK(p[0] >= 0.0f);
      CHECK(p[0] <= 1.0f);
      CHECK(p[1] >= 0.0f);
      CHECK(p[1] <= 1.0f);
    }
  CHECK(seq.frames[0].pos3d[0][0] == doctest::Approx(0.0f));
  CHECK(seq.frames[0].pos3d[0][1] == doctest::Approx(0.0f));
  CHECK(seq.frames[0].pos3d[0][2] == doctest::Approx(0.0f));
  // rotations arrive as two orthonormal matrix columns
  const auto& r6 = seq.frames[1].rot6d[5];
  const double n1 = std::sqrt(double(r6[0]) * r6[0] + double(r6[1]) * r6[1] + double(r6[2]) * r6[2]);
  const double n2 = std::sqrt(double(r6[3]) * r6[3] + double(r6[4]) * r6[4] + double(r6[5]) * r6[5]);
  CHECK(n1 == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(n2 == doctest::Approx(1.0).epsilon(1e-5));

  // malformed input names the file and fails
  std::ofstream(raw / "bad.json") << "{\"gloss\": \"x\"}";
  auto rb = run_cli("preprocess --input " + (raw / "bad.json").string() + " --out " +
                        (dir / "ds2").string(),
                    dir);
  CHECK(rb.exit_code != 0);
  CHECK(rb.output.find("bad.json") != std::string::npos);
}

TEST_CASE("costs reports every ensemble for both class counts") {
  const fs::path dir = fresh_scratch("costs");
  auto r = run_cli("costs --out " + (dir / "out").string(), dir);
  INFO(r.output);
  REQUIRE(r.exit_code == 0);
  CHECK(r.output.find("classes = 100") != std::string::npos);
  CHECK(r.output.find("classes = 2000") != std::string::npos);
  CHECK(r.output.find("early") != std::string::npos);
  CHECK(r.output.find("middle") != std::string::npos);
  CHECK(r.output.find("late") != std::string::npos);

  const auto j = nlohmann::json::parse(slurp(dir / "out" / "costs.json"));
  REQUIRE(j.at("tables").size() == 2);
  const auto& rows = j.at("tables")[0].at("rows");
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].at("ensemble") == "early");
  CHECK(rows[0].at("params") == 3719060);
  const double early_flops = rows[0].at("flops_per_clip").get<double>();
  const double middle_flops = rows[1].at("flops_per_clip").get<double>();
  CHECK(middle_flops / early_flops > 1.6);
  CHECK(middle_flops / early_flops < 2.8);

  // a class count of its own gets its own table
  std::ofstream(dir / "odd.cfg") << "[model]\nnum_classes = 7\n";
  auto r2 = run_cli("costs --config " + (dir / "odd.cfg").string() + " --out " +
                        (dir / "out2").string(),
                    dir);
  REQUIRE(r2.exit_code == 0);
  CHECK(r2.output.find("classes = 7") != std::string::npos);
  const auto j2 = nlohmann::json::parse(slurp(dir / "out2" / "costs.json"));
  CHECK(j2.at("tables").size() == 3);
}

TEST_CASE("gradcheck passes in double precision") {
  const fs::path dir = fresh_scratch("gradcheck");
  auto r = run_cli("gradcheck --seed 3", dir);
  INFO(r.output);
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("PASS") != std::string::npos);
  CHECK(r.output.find("max relative error") != std::string::npos);
}

TEST_CASE("bad invocations fail with a nonzero exit and a reason") {
  const fs::path dir = fresh_scratch("badargs");
  auto r1 = run_cli("frobnicate", dir);
  CHECK(r1.exit_code != 0);

  auto r2 = run_cli("train", dir);  // no config -> no manifest
  CHECK(r2.exit_code != 0);
  CHECK(r2.output.find("error:") != std::string::npos);
  CHECK(r2.output.find("manifest") != std::string::npos);

  std::ofstream(dir / "bad.cfg") << "[model]\nfrobnicate = 3\n";
  auto r3 = run_cli("train --config " + (dir / "bad.cfg").string(), dir);
  CHECK(r3.exit_code != 0);
  CHECK(r3.output.find("frobnicate") != std::string::npos);

  auto r4 = run_cli("eval --split nowhere --checkpoint x.ckpt", dir);
  CHECK(r4.exit_code != 0);

  auto r5 = run_cli("train --precision half", dir);
  CHECK(r5.exit_code != 0);

  // class-count mismatch between config and manifest is caught before training
  write_micro_config(dir / "run.cfg", dir / "data" / "manifest.json", 1);
  REQUIRE(run_cli("synth --config " + (dir / "run.cfg").string() + " --out " +
                      (dir / "data").string(),
                  dir)
              .exit_code == 0);
  std::ofstream(dir / "mismatch.cfg") << "[model]\nnum_classes = 5\n[data]\nmanifest = "
                                      << (dir / "data" / "manifest.json").string() << "\n";
  auto r6 = run_cli("train --config " + (dir / "mismatch.cfg").string(), dir);
  CHECK(r6.exit_code != 0);
  CHECK(r6.output.find("num_classes") != std::string::npos);
}

TEST_CASE("ablate trains every variant and writes all four family tables") {
  const fs::path dir = fresh_scratch("ablate");
  const fs::path manifest = dir / "data" / "manifest.json";
  write_micro_config(dir / "run.cfg", manifest, 1);
  REQUIRE(run_cli("synth --config " + (dir / "run.cfg").string() + " --out " +
                      (dir / "data").string(),
                  dir)
              .exit_code == 0);
  auto r = run_cli("ablate --config " + (dir / "run.cfg").string() + " --out " +
                       (dir / "out").string(),
                   dir);
  INFO(r.output);
  REQUIRE(r.exit_code == 0);
  for (const char* family : {"[parts]", "[encodings]", "[representations]", "[ensembles]"})
    CHECK(r.output.find(family) != std::string::npos);
  for (const char* variant : {"B,H,E", "PET-WET", "MLP-PET", "pos2d+pos3d+rot6d", "late"})
    CHECK(r.output.find(variant) != std::string::npos);

  const auto j = nlohmann::json::parse(slurp(dir / "out" / "ablation.json"));
  CHECK(j.size() == 20);
  int trained = 0;
  for (const auto& e : j) {
    CHECK(e.at("params").get<long long>() > 0);
    CHECK(e.at("test_top1").get<double>() >= 0.0);
    ++trained;
  }
  CHECK(trained == 20);
}
