#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dmprune/cli.hpp"
#include "dmprune/dmb.hpp"

using namespace dmprune;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// Demo model, calibration and gradients, created once per test binary.
const fs::path& workdir() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "dmprune-unit-cli";
    fs::remove_all(d);
    const auto demo = d / "demo";
    REQUIRE(cli({"demo-export", "--out", demo.string(), "--calib-samples", "16"}).code == kExitOk);
    REQUIRE(cli({"grad", "--model", (demo / "model.dmb").string(), "--calib", (demo / "calib.dmb").string()}).code ==
            kExitOk);
    return d;
  }();
  return dir;
}

std::string model() { return (workdir() / "demo" / "model.dmb").string(); }
std::string calib() { return (workdir() / "demo" / "calib.dmb").string(); }

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(cli({"allocate", "--bogus"}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"allocate", "--model", model(), "--kappa", "banana", "--no-cache"}).code == kExitUsage);
  CHECK(cli({"allocate", "--model", model(), "--kappa", "-1", "--no-cache"}).code == kExitUsage);
  const auto both = cli({"allocate", "--model", model(), "--flops-ratio", "0.5", "--prune-count", "10", "--no-cache"});
  CHECK(both.code == kExitUsage);
  CHECK(both.err.find("excludes") != std::string::npos);
  CHECK(cli({"allocate", "--model", model(), "--delta-mode", "cubed"}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("allocate at ratio one prunes nothing") {
  const auto r = cli({"allocate", "--model", model(), "--flops-ratio", "1.0", "--no-cache", "--kappa", "auto"});
  REQUIRE(r.code == kExitOk);
  const auto j = nlohmann::json::parse(r.out);
  for (const auto& l : j["layers"]) CHECK(l["k"].get<std::size_t>() == 0);
  CHECK(j["total_delta"].get<double>() == 0.0);
}

TEST_CASE("global options may follow the subcommand") {
  const auto a = cli({"allocate", "--model", model(), "--prune-count", "100", "--no-cache", "--seed", "3", "--threads", "1"});
  const auto b = cli({"--seed", "3", "allocate", "--model", model(), "--prune-count", "100", "--no-cache"});
  REQUIRE(a.code == kExitOk);
  CHECK(a.out == b.out);
  std::size_t pruned = 0;
  const auto j = nlohmann::json::parse(a.out);
  for (const auto& l : j["layers"]) pruned += l["k"].get<std::size_t>();
  CHECK(pruned >= 100);
}

TEST_CASE("missing gradients are a data error") {
  const auto lonely = workdir() / "lonely";
  fs::create_directories(lonely);
  fs::copy_file(model(), lonely / "model.dmb", fs::copy_options::overwrite_existing);
  const auto r = cli({"prune", "--model", (lonely / "model.dmb").string(), "--out", (lonely / "p.dmb").string()});
  CHECK(r.code == kExitData);
  CHECK(r.err.find("missing gradient bundle") != std::string::npos);

  std::ofstream(lonely / "junk.dmb") << "not a bundle";
  CHECK(cli({"allocate", "--model", (lonely / "junk.dmb").string(), "--no-cache"}).code == kExitData);
}

TEST_CASE("prune, eval and sweep") {
  const auto out = workdir() / "pruned.dmb";
  const auto p = cli({"prune", "--model", model(), "--out", out.string(), "--calib", calib(), "--no-timestamps",
                      "--cache-dir", (workdir() / "cache").string()});
  REQUIRE(p.code == kExitOk);
  const auto pruned = load_model(out);
  CHECK(pruned.masks.size() == 4);
  std::ifstream rep(out.string() + ".report.json");
  const auto report = nlohmann::json::parse(rep);
  CHECK(report["flops"]["ratio"].get<double>() <= 0.51);

  const auto e = cli({"eval", "--dense", model(), "--pruned", out.string(), "--calib", calib()});
  REQUIRE(e.code == kExitOk);
  const auto j = nlohmann::json::parse(e.out);
  CHECK(j["true_distortion"].get<double>() > 0.0);
  CHECK(j["flops_ratio"].get<double>() == doctest::Approx(report["flops"]["ratio"].get<double>()).epsilon(1e-12));
  CHECK(j["true_distortion"].get<double>() ==
        doctest::Approx(report["diagnostics"]["evaluation"]["true_distortion"].get<double>()).epsilon(1e-12));

  const auto same = cli({"eval", "--dense", model(), "--pruned", model(), "--calib", calib()});
  CHECK(nlohmann::json::parse(same.out)["true_distortion"].get<double>() == 0.0);

  const auto s = cli({"sweep", "--model", model(), "--ratios", "1.0,0.5", "--no-cache"});
  REQUIRE(s.code == kExitOk);
  CHECK(std::count(s.out.begin(), s.out.end(), '\n') == 3);
  CHECK(cli({"sweep", "--model", model(), "--ratios", "0.5,x", "--no-cache"}).code != kExitOk);
}

TEST_CASE("verify with an unknown criterion is a usage error") {
  CHECK(cli({"verify", "--only", "nonsense"}).code == kExitUsage);
}
