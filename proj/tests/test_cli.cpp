// End-to-end checks of the command-line surface. The binary path comes from
// the CDL_BIN environment variable (set by the CTest definition).

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

namespace fs = std::filesystem;

namespace {

std::string bin() {
  const char* b = std::getenv("CDL_BIN");
  REQUIRE(b != nullptr);
  return b;
}

int run(const std::string& args) {
  const std::string cmd = bin() + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

const std::string kData = "synthetic:train=500,test=150";
const std::string kWork = "/tmp/cdl_cli_work";

struct Workspace {
  Workspace() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
  }
};

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("train is reproducible byte for byte") {
    Workspace ws;
    const std::string base = " train --mode rcdl --bits 4 --epochs 2 --batch-size 50 --seed 9 "
                             "--no-huffman --dataset " + kData;
    CHECK(run(base + " --out " + kWork + "/a") == 0);
    CHECK(run(base + " --out " + kWork + "/b") == 0);
    CHECK(slurp(kWork + "/a/model.ckpt") == slurp(kWork + "/b/model.ckpt"));
    CHECK(slurp(kWork + "/a/metrics.csv") == slurp(kWork + "/b/metrics.csv"));
  }

  TEST_CASE("invalid lambda is a usage error with exit code 2") {
    CHECK(run("train --lambda -1 --dataset " + kData) == 2);
    CHECK(run("definitely-not-a-command") == 2);
    CHECK(run("train --bits 11 --dataset " + kData) == 2);
  }

  TEST_CASE("zero-penalty entropy columns start near the bit width") {
    Workspace ws;
    CHECK(run("train --mode rcdl --bits 4 --epochs 1 --batch-size 50 --seed 3 --lambda 0 "
              "--gamma 0 --dataset " + kData + " --out " + kWork + "/z") == 0);
    std::ifstream csv(kWork + "/z/metrics.csv");
    std::string line, last;
    while (std::getline(csv, line))
      if (!line.empty() && line[0] != '#' && line[0] != 'e') last = line;
    std::stringstream ss(last);
    std::string tok;
    std::vector<double> cols;
    while (std::getline(ss, tok, ',')) cols.push_back(std::stod(tok));
    REQUIRE(cols.size() == 8);
    const double hw = cols[3];
    CHECK(hw > 4.0 - 1.5);
    CHECK(hw <= 4.0 + 1e-9);
  }

  TEST_CASE("compress then verify round-trips; a flipped byte is caught") {
    Workspace ws;
    REQUIRE(run("train --mode rcdl --bits 4 --epochs 1 --batch-size 50 --seed 4 --no-huffman "
                "--dataset " + kData + " --out " + kWork + "/t") == 0);
    const std::string ck = kWork + "/t/model.ckpt", cz = kWork + "/t/model.cdlc";
    CHECK(run("compress --checkpoint " + ck + " --out " + cz + " --dataset " + kData) == 0);
    CHECK(run("verify --file " + cz) == 0);
    // compress is deterministic
    CHECK(run("compress --checkpoint " + ck + " --out " + cz + ".again --dataset " + kData) == 0);
    CHECK(slurp(cz) == slurp(cz + ".again"));
    // flip one payload byte
    std::string buf = slurp(cz);
    buf[buf.size() / 2] = static_cast<char>(buf[buf.size() / 2] ^ 0x40);
    std::ofstream(cz, std::ios::binary | std::ios::trunc).write(buf.data(),
                                                                static_cast<std::streamsize>(buf.size()));
    CHECK(run("verify --file " + cz) != 0);
  }

  TEST_CASE("eval loads a checkpoint and reports accuracy") {
    Workspace ws;
    REQUIRE(run("train --mode rcdl --bits 4 --epochs 2 --batch-size 50 --seed 5 --no-huffman "
                "--dataset " + kData + " --out " + kWork + "/e") == 0);
    CHECK(run("eval --checkpoint " + kWork + "/e/model.ckpt --mode rcdl --dataset " + kData) == 0);
  }

  TEST_CASE("gradcheck subcommand gates on its suites") {
    CHECK(run("gradcheck --suites prop1 --instances 2000 --seed 12") == 0);
    CHECK(run("gradcheck --suites dtheta --instances 50 --seed 12 --corrupt-derivative") == 1);
  }

  TEST_CASE("export-metrics errors on an empty directory and exports a real run") {
    Workspace ws;
    fs::create_directories(kWork + "/empty");
    CHECK(run("export-metrics --run " + kWork + "/empty --out " + kWork + "/exp0") == 1);
    REQUIRE(run("train --mode rcdl --bits 4 --epochs 2 --batch-size 50 --seed 6 "
                "--dataset " + kData + " --out " + kWork + "/r") == 0);
    CHECK(run("export-metrics --run " + kWork + "/r --out " + kWork + "/exp") == 0);
    for (const char* f : {"frontier.csv", "bits_vs_epoch.csv", "objective_vs_epoch.csv",
                          "weight_histograms.csv"})
      CHECK(fs::exists(kWork + "/exp/" + std::string(f)));
    // histogram export conserves the weight count per epoch
    std::ifstream h(kWork + "/exp/weight_histograms.csv");
    std::string line;
    std::getline(h, line);
    std::getline(h, line);
    std::int64_t epoch1 = 0;
    while (std::getline(h, line)) {
      std::stringstream ss(line);
      std::string run_id, epoch, layer, bin, count;
      std::getline(ss, run_id, ',');
      std::getline(ss, epoch, ',');
      std::getline(ss, layer, ',');
      std::getline(ss, bin, ',');
      std::getline(ss, count, ',');
      if (epoch == "1") epoch1 += std::stoll(count);
    }
    CHECK(epoch1 == 21918);  // desk cnn weight count
  }

  TEST_CASE("sweep writes one row per pair") {
    Workspace ws;
    CHECK(run("sweep --mode rcdl --bits 4 --epochs 1 --batch-size 50 --seed 8 --no-huffman "
              "--pairs 0:0,0.05:0.05 --dataset " + kData + " --out " + kWork + "/sw") == 0);
    std::ifstream csv(kWork + "/sw/sweep.csv");
    int rows = 0;
    std::string line;
    while (std::getline(csv, line))
      if (!line.empty() && line[0] != '#' && line.substr(0, 6) != "lambda") ++rows;
    CHECK(rows == 2);
  }

  TEST_CASE("parsim command produces a ledger") {
    Workspace ws;
    CHECK(run("parsim --mode rcdl --bits 4 --epochs 2 --batch-size 50 --seed 10 --no-huffman "
              "--plan-mode data --workers 2 --policy fixedb --dataset " + kData + " --out " +
              kWork + "/ps") == 0);
    CHECK(fs::exists(kWork + "/ps/comm_ledger.csv"));
    CHECK(fs::exists(kWork + "/ps/comm_summary.json"));
  }

  TEST_CASE("config file with flag overrides") {
    Workspace ws;
    std::ofstream(kWork + "/cfg.json") << R"({"schema_version":1,"mode":"rcdl","bits":4,)"
                                       << R"("epochs":1,"batch_size":50,"lambda":0.01,)"
                                       << R"("gamma":0.01,"seed":2,"measure_huffman":false,)"
                                       << R"("dataset":")" << kData << R"("})";
    CHECK(run("train --config " + kWork + "/cfg.json --epochs 2 --out " + kWork + "/cf") == 0);
    std::ifstream csv(kWork + "/cf/metrics.csv");
    int rows = 0;
    std::string line;
    while (std::getline(csv, line))
      if (!line.empty() && line[0] != '#' && line[0] != 'e') ++rows;
    CHECK(rows == 2);  // the --epochs flag overrode the file
  }
}
