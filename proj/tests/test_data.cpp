#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "mpg/data.hpp"

using namespace mpg;

namespace {

std::filesystem::path tmp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("generation is deterministic per (config, index)") {
  SynthConfig cfg;
  cfg.seed = 77;
  auto a = generate(cfg, 3);
  auto b = generate(cfg, 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].labels.v == b[i].labels.v);
  }
  // sample i does not depend on how many samples were requested
  auto c = generate(cfg, 1);
  CHECK(c[0].image == a[0].image);
}

TEST_CASE("noiseless images invert to the exact label map by nearest intensity") {
  SynthConfig cfg;
  cfg.noise_sigma = 0.0;
  cfg.seed = 5;
  const auto means = SynthConfig::default_means(cfg.class_count());
  for (const Sample& s : generate(cfg, 2)) {
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const float v = s.image[static_cast<size_t>(y) * s.width + x];
        int best = 0;
        for (int k = 1; k < cfg.class_count(); ++k)
          if (std::abs(v - means[k]) < std::abs(v - means[best])) best = k;
        CHECK(best == s.labels.at(0, y, x));
      }
  }
}

TEST_CASE("every class appears with frequency above 1% over 100 samples") {
  SynthConfig cfg;
  cfg.seed = 9;
  const auto samples = generate(cfg, 100);
  std::vector<long> counts(cfg.class_count(), 0);
  long total = 0;
  for (const auto& s : samples)
    for (auto v : s.labels.v) {
      ++counts[v];
      ++total;
    }
  for (int k = 0; k < cfg.class_count(); ++k)
    CHECK(static_cast<double>(counts[k]) / total > 0.01);
}

TEST_CASE("labels are non-decreasing down every column") {
  SynthConfig cfg;
  cfg.seed = 13;
  for (const Sample& s : generate(cfg, 5))
    for (int x = 0; x < s.width; ++x)
      for (int y = 1; y < s.height; ++y)
        CHECK(s.labels.at(0, y, x) >= s.labels.at(0, y - 1, x));
}

TEST_CASE("foreground layers occupy at least one row per column") {
  SynthConfig cfg;
  cfg.seed = 17;
  for (const Sample& s : generate(cfg, 3))
    for (int x = 0; x < s.width; ++x) {
      std::vector<int> rows(cfg.class_count(), 0);
      for (int y = 0; y < s.height; ++y) ++rows[s.labels.at(0, y, x)];
      for (int k = 1; k < cfg.class_count(); ++k) CHECK(rows[k] >= 1);
    }
}

TEST_CASE("a config violating the minimum gap is rejected") {
  SynthConfig cfg;
  cfg.amp_max = 50.0;  // worst-case perturbation swamps the base gap
  CHECK_THROWS_AS(generate(cfg, 1), ConfigError);

  SynthConfig odd;
  odd.height = 60;  // not divisible by 8
  CHECK_THROWS_AS(generate(odd, 1), ConfigError);
}

TEST_CASE("close intensity means are rejected") {
  SynthConfig cfg;
  cfg.layer_intensity_means = {0.05, 0.07, 0.3, 0.6, 0.2, 0.7, 0.4, 0.95};
  CHECK_THROWS_AS(generate(cfg, 1), ConfigError);
}

TEST_CASE("pgm header is width-then-height") {
  const auto path = tmp_path("mpg_header.pgm");
  write_image_pgm(std::vector<float>(64 * 128, 0.5f), 64, 128, path.string());
  std::ifstream is(path, std::ios::binary);
  std::string head(15, '\0');
  is.read(head.data(), 15);
  CHECK(head == "P5\n128 64\n255\n\x80");
  std::filesystem::remove(path);
}

TEST_CASE("image quantization rounds half up") {
  const auto path = tmp_path("mpg_quant.pgm");
  write_image_pgm({0.0f, 0.5f, 0.5f, 1.0f}, 2, 2, path.string());
  std::ifstream is(path, std::ios::binary);
  std::string all((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::string payload = all.substr(all.size() - 4);
  CHECK(static_cast<uint8_t>(payload[0]) == 0);
  CHECK(static_cast<uint8_t>(payload[1]) == 128);
  CHECK(static_cast<uint8_t>(payload[2]) == 128);
  CHECK(static_cast<uint8_t>(payload[3]) == 255);
  std::filesystem::remove(path);
}

TEST_CASE("image round trip is lossy only by 8-bit quantization") {
  SynthConfig cfg;
  cfg.seed = 23;
  const Sample s = generate(cfg, 1)[0];
  const auto path = tmp_path("mpg_img.pgm");
  write_image_pgm(s.image, s.height, s.width, path.string());
  int h = 0, w = 0;
  const auto back = read_image_pgm(path.string(), h, w);
  CHECK(h == s.height);
  CHECK(w == s.width);
  for (size_t i = 0; i < back.size(); ++i)
    CHECK(std::abs(back[i] - s.image[i]) <= 1.0f / 510.0f + 1e-7f);
  std::filesystem::remove(path);
}

TEST_CASE("label round trip is lossless") {
  SynthConfig cfg;
  cfg.seed = 29;
  const Sample s = generate(cfg, 1)[0];
  const auto path = tmp_path("mpg_lab.pgm");
  write_label_pgm(s.labels, path.string());
  const LabelMap back = read_label_pgm(path.string(), cfg.class_count());
  CHECK(back.v == s.labels.v);

  LabelMap zeros = LabelMap::zeros(1, 8, 8);
  write_label_pgm(zeros, path.string());
  const LabelMap zback = read_label_pgm(path.string(), 8);
  for (auto v : zback.v) CHECK(v == 0);
  std::filesystem::remove(path);
}

TEST_CASE("malformed pgm files fail with byte offsets") {
  const auto path = tmp_path("mpg_bad.pgm");
  int h = 0, w = 0;
  {
    std::ofstream os(path, std::ios::binary);
    os << "P6\n2 2\n255\n";
  }
  CHECK_THROWS_AS(read_image_pgm(path.string(), h, w), DataError);
  {
    std::ofstream os(path, std::ios::binary);
    os << "P5\n2 2\n255\n";
    os.put(1);  // 3 bytes short
  }
  try {
    read_image_pgm(path.string(), h, w);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    CHECK(std::string(e.what()).find("byte") != std::string::npos);
  }
  {
    std::ofstream os(path, std::ios::binary);
    os << "P5\n2 1\n255\n";
    os.put(3);
    os.put(9);  // 9 >= K for K=8
  }
  try {
    read_label_pgm(path.string(), 8);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find(">= K=8") != std::string::npos);
    CHECK(msg.find("byte 1") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("resize to the same size is the identity") {
  SynthConfig cfg;
  cfg.seed = 31;
  const Sample s = generate(cfg, 1)[0];
  const Sample r = resize_to_model(s, s.height, s.width);
  CHECK(r.image == s.image);
  CHECK(r.labels.v == s.labels.v);
}

TEST_CASE("a constant image stays constant at any size") {
  Sample s;
  s.height = 16;
  s.width = 16;
  s.image.assign(256, 0.625f);
  s.labels = LabelMap::zeros(1, 16, 16);
  const Sample r = resize_to_model(s, 32, 48);
  for (float v : r.image) CHECK(v == doctest::Approx(0.625f));
  CHECK_THROWS_AS(resize_to_model(s, 30, 48), ConfigError);
}

TEST_CASE("label down-up round trip differs only near boundaries") {
  SynthConfig cfg;
  cfg.seed = 37;
  const Sample s = generate(cfg, 1)[0];
  const LabelMap down = resize_labels_nearest(s.labels, s.height / 2, s.width / 2);
  const LabelMap up = resize_labels_nearest(down, s.height, s.width);

  long boundary = 0;  // vertically adjacent pixel pairs with different labels
  for (int x = 0; x < s.width; ++x)
    for (int y = 1; y < s.height; ++y)
      if (s.labels.at(0, y, x) != s.labels.at(0, y - 1, x)) ++boundary;

  long hamming = 0;
  for (long i = 0; i < s.labels.total(); ++i)
    if (up.v[i] != s.labels.v[i]) ++hamming;
  CHECK(hamming < 2 * boundary * 2);
}

TEST_CASE("manifest round trip and error reporting") {
  const auto dir = tmp_path("mpg_manifest_dir");
  std::filesystem::create_directories(dir);
  SynthConfig cfg;
  cfg.seed = 41;
  const auto samples = generate(cfg, 2);
  std::vector<std::pair<std::string, std::string>> entries;
  for (int i = 0; i < 2; ++i) {
    const std::string img = (dir / ("img" + std::to_string(i) + ".pgm")).string();
    const std::string lab = (dir / ("lab" + std::to_string(i) + ".pgm")).string();
    write_image_pgm(samples[i].image, samples[i].height, samples[i].width, img);
    write_label_pgm(samples[i].labels, lab);
    entries.emplace_back(img, lab);
  }
  const std::string manifest = (dir / "manifest.txt").string();
  write_manifest(entries, manifest);
  CHECK(read_manifest(manifest) == entries);

  const auto loaded = load_dataset(manifest, cfg.class_count());
  CHECK(loaded.size() == 2);
  CHECK(loaded[0].labels.v == samples[0].labels.v);

  {
    std::ofstream os(manifest);
    os << "no_tab_here\n";
  }
  CHECK_THROWS_AS(read_manifest(manifest), DataError);
  std::filesystem::remove_all(dir);
}
