#include "support.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include "json.hpp"
#include "maskany/dataset.hpp"

namespace {

struct Result {
  int status = -1;
  std::string out;
};

// Runs the CLI binary with stderr discarded; returns exit status and stdout.
Result run(const std::string& args) {
  const std::string cmd = std::string(MASKANY_CLI_PATH) + " " + args + " 2>/dev/null";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

}  // namespace

TEST_CASE("usage errors exit with status 2") {
  CHECK(run("").status != 0);
  CHECK(run("frobnicate").status == 2);
  CHECK(run("mask-preview --ratio").status == 2);
  CHECK(run("mask-preview --set nope.key=1").status == 2);
  CHECK(run("mask-preview --strategy cutout").status == 2);
  CHECK(run("eval").status == 2);  // --checkpoint is required
  CHECK(run("--help").status == 0);
}

TEST_CASE("runtime failures exit with status 1") {
  testing::TempDir dir("cli_fail");
  CHECK(run("eval --checkpoint " + (dir.path() / "none.pt").string() + " --out " +
            dir.path().string())
            .status == 1);
  CHECK(run("mask-preview --image " + (dir.path() / "none.png").string() + " --out " +
            dir.path().string())
            .status == 1);
}

TEST_CASE("mask preview writes its artifacts and reports a bit-exact round trip") {
  testing::TempDir dir("cli_preview");
  auto r = run("mask-preview --strategy patch --ratio 0.25 --block-size 16 --json --out " +
               dir.path().string());
  REQUIRE(r.status == 0);
  auto j = nlohmann::json::parse(r.out);
  CHECK(j.at("artifacts").size() >= 5);
  for (const auto& name : {"original.png", "masked.png", "reuse.png", "reuse_resized.png",
                           "mask.txt"}) {
    CHECK(std::filesystem::exists(dir.path() / name));
  }
  CHECK(j.at("round_trip") == true);
}

TEST_CASE("analyze on an image folder") {
  testing::TempDir dir("cli_analyze");
  maskany::write_photo_corpus(dir.path() / "imgs", 10, 64, 3);
  const std::string args = "analyze --images " + (dir.path() / "imgs").string() +
                           " --block-size 8 --json --out ";
  auto a = run(args + (dir.path() / "a").string());
  auto b = run(args + (dir.path() / "b").string());
  REQUIRE(a.status == 0);
  REQUIRE(b.status == 0);
  std::ifstream fa(dir.path() / "a" / "analysis.csv"), fb(dir.path() / "b" / "analysis.csv");
  std::string ca((std::istreambuf_iterator<char>(fa)), {});
  std::string cb((std::istreambuf_iterator<char>(fb)), {});
  CHECK_FALSE(ca.empty());
  CHECK(ca == cb);
  // Header, 3 x 10 records and 3 summaries.
  CHECK(std::count(ca.begin(), ca.end(), '\n') == 1 + 30 + 3);
  CHECK(std::filesystem::exists(dir.path() / "a" / "analysis_summary.json"));
}
