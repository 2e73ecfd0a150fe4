#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <iterator>

#include "gcnn/errors.hpp"
#include "gcnn/report.hpp"
#include "temp_dir.hpp"

using namespace gcnn;
namespace fs = std::filesystem;

namespace {

CVResult fake_result(double normal_mean, double normal_std) {
  CVResult r;
  r.config = {{"epochs", 3}};
  r.class_names = {"a", "b"};
  for (std::size_t fold = 0; fold < 2; ++fold) {
    EvalResult e;
    e.set = SetKind::normal;
    e.fold = fold;
    e.accuracy = fold == 0 ? 100 : 50;
    e.confusion = {{1, 0}, {fold, 1 - fold}};
    e.ids = {"c00-000", "c01-000"};
    e.labels = {0, 1};
    e.predictions = {0, fold == 0 ? 1u : 0u};
    r.folds.push_back(e);
  }
  r.summary[SetKind::normal] = summarize(r.folds, SetKind::normal, 2);
  r.summary[SetKind::normal].mean = normal_mean;
  r.summary[SetKind::normal].std = normal_std;
  r.logs = {{{0.7, 0.5}, 1.25}, {{0.69, 0.4}, 2.5}};
  r.audit = {{"g_max", 1e-6}};
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("mean and std formatting") {
  CHECK(format_mean_std(94.0, 6.11) == "94.0±6.11");
  CHECK(format_mean_std(70.0, 14.1) == "70.0±14.1");
  CHECK(format_mean_std(96.04, 0.5) == "96.0±0.500");
  CHECK(format_mean_std(100, 0) == "100.0±0.00");
  CHECK(format_mean_std(33.333, 57.735) == "33.3±57.7");
  CHECK(format_mean_std(12.25, 100.0) == "12.2±100");
}

TEST_CASE("confusion CSV round trip") {
  const Confusion m{{5, 0, 1}, {2, 3, 0}, {0, 0, 12}};
  const std::vector<std::string> names{"axis", "diag", "iso"};
  const auto text = confusion_csv(m, names);
  CHECK(text.rfind("true\\pred,axis,diag,iso\n", 0) == 0);
  const auto back = parse_confusion_csv(text);
  CHECK(back.matrix == m);
  CHECK(back.class_names == names);

  const auto numbered = parse_confusion_csv(confusion_csv(m, {}));
  CHECK(numbered.class_names == std::vector<std::string>{"0", "1", "2"});

  CHECK_THROWS_AS(parse_confusion_csv(""), FormatError);
  CHECK_THROWS_AS(parse_confusion_csv("pred,a\na,1\n"), FormatError);
  CHECK_THROWS_AS(parse_confusion_csv("true\\pred,a,b\na,1,2\n"), FormatError);
  CHECK_THROWS_AS(parse_confusion_csv("true\\pred,a,b\na,1,2\nb,3\n"), FormatError);
  CHECK_THROWS_AS(parse_confusion_csv("true\\pred,a,b\na,1,2\nb,3,-4\n"), FormatError);
  CHECK_THROWS_AS(parse_confusion_csv("true\\pred,a,b\na,1,2\nb,3,x\n"), FormatError);
  CHECK_THROWS_AS(parse_confusion_csv("true\\pred,a,b\nb,1,2\na,3,4\n"), FormatError);
  CHECK_THROWS_AS(confusion_csv(m, {"a,b", "c", "d"}), FormatError);
}

TEST_CASE("heatmap of a diagonal matrix") {
  const Confusion m{{4, 0, 0}, {0, 7, 0}, {0, 0, 1}};
  const auto ppm = confusion_ppm(m, 2);
  const std::string header = "P6\n6 6\n255\n";
  REQUIRE(ppm.rfind(header, 0) == 0);
  REQUIRE(ppm.size() == header.size() + 6 * 6 * 3);
  for (std::size_t y = 0; y < 6; ++y)
    for (std::size_t x = 0; x < 6; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const auto v = static_cast<unsigned char>(ppm[header.size() + (y * 6 + x) * 3 + c]);
        CHECK(v == (y / 2 == x / 2 ? 255 : 0));
      }
}

TEST_CASE("heatmap rows are normalized by their totals") {
  const Confusion m{{1, 3}, {0, 0}};
  const auto ppm = confusion_ppm(m, 1);
  const std::size_t at = std::string("P6\n2 2\n255\n").size();
  CHECK(static_cast<unsigned char>(ppm[at]) == 64);
  CHECK(static_cast<unsigned char>(ppm[at + 3]) == 191);
  CHECK(static_cast<unsigned char>(ppm[at + 6]) == 0);
  CHECK(static_cast<unsigned char>(ppm[at + 9]) == 0);
}

TEST_CASE("accuracy table layout") {
  auto a = fake_result(94.0, 6.11);
  auto b = fake_result(70.0, 14.1);
  b.summary[SetKind::o_rotate] = b.summary[SetKind::normal];
  const auto csv = accuracy_csv({{"z3", a}, {"g_max/o", b}});
  CHECK(csv == "network,normal,o_rotate\nz3,94.0±6.11,\ng_max/o,70.0±14.1,70.0±14.1\n");
}

TEST_CASE("results JSON round trip") {
  const auto r = fake_result(75, 35.4);
  const auto j = r.to_json();
  const auto back = CVResult::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(j.at("audit").at("g_max") == 1e-6);
  CHECK(j.dump().find("seconds") == std::string::npos);
  CHECK(r.timing_json().at("train_seconds") == nlohmann::json{1.25, 2.5});
  CHECK_THROWS_AS(CVResult::from_json({{"config", {}}}), FormatError);
  auto bad = j;
  bad["folds"][0]["set"] = "sideways";
  CHECK_THROWS_AS(CVResult::from_json(bad), FormatError);
}

TEST_CASE("export writes every artifact") {
  TempDir dir("export");
  const auto r = fake_result(75, 35.4);
  const auto files = export_results({{"g_max/o", r}}, dir.path / "out");
  CHECK(files.size() == 5);
  for (const auto& f : files) CHECK(fs::exists(f));
  const fs::path sub = dir.path / "out" / "g_max_o";
  CHECK(parse_confusion_csv(slurp(sub / "confusion_normal.csv")).matrix == r.summary.at(SetKind::normal).confusion);
  CHECK(nlohmann::json::parse(slurp(sub / "results.json")) == r.to_json());
  CHECK(slurp(dir.path / "out" / "accuracy.csv") == accuracy_csv({{"g_max/o", r}}));

  // a regular file where a directory is needed
  write_text(dir.path / "blocker", "x");
  CHECK_THROWS_AS(export_results({{"n", r}}, dir.path / "blocker" / "out"), FormatError);
}
