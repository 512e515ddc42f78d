#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "sprune/data.hpp"
#include "sprune/error.hpp"

using namespace sprune;

namespace {

std::vector<std::uint8_t> random_records(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::uint8_t> bytes(n * kCifarRecordBytes);
  std::uniform_int_distribution<int> px(0, 255), lab(0, 9);
  for (std::size_t r = 0; r < n; ++r) {
    bytes[r * kCifarRecordBytes] = static_cast<std::uint8_t>(lab(rng));
    for (std::size_t b = 1; b < kCifarRecordBytes; ++b)
      bytes[r * kCifarRecordBytes + b] = static_cast<std::uint8_t>(px(rng));
  }
  return bytes;
}

ErrorKind kind_of(const std::function<void()>& fn, std::string* msg = nullptr) {
  try {
    fn();
  } catch (const Error& e) {
    if (msg) *msg = e.what();
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::contract;
}

}  // namespace

TEST_CASE("cifar record decodes label and scaled pixels") {
  std::vector<std::uint8_t> rec(kCifarRecordBytes, 128);
  rec[0] = 3;
  const Dataset d = parse_cifar10(rec, "one.bin");
  REQUIRE(d.size() == 1);
  CHECK(d.labels[0] == 3);
  CHECK(d.images.shape() == Shape{1, 3, 32, 32});
  for (float v : d.images.data()) CHECK(v == doctest::Approx(128.0 / 255.0).epsilon(1e-7));
}

TEST_CASE("cifar channel planes are laid out R, G, B") {
  std::vector<std::uint8_t> rec(kCifarRecordBytes, 0);
  rec[1] = 10;                // R(0,0)
  rec[1 + 1024] = 20;         // G(0,0)
  rec[1 + 2048 + 33] = 30;    // B(1,1)
  const Dataset d = parse_cifar10(rec, "planes.bin");
  CHECK(d.images[0] == doctest::Approx(10 / 255.0));
  CHECK(d.images[1024] == doctest::Approx(20 / 255.0));
  CHECK(d.images[2048 + 32 + 1] == doctest::Approx(30 / 255.0));
}

TEST_CASE("cifar encode/parse round trip is exact") {
  std::mt19937_64 rng(4);
  const auto bytes = random_records(5, rng);
  const Dataset d = parse_cifar10(bytes, "rt.bin");
  CHECK(encode_cifar10(d) == bytes);
}

TEST_CASE("truncated cifar file names the offset of the incomplete record") {
  std::vector<std::uint8_t> short_file(3072, 0);
  std::string msg;
  CHECK(kind_of([&] { parse_cifar10(short_file, "short.bin"); }, &msg) == ErrorKind::format);
  CHECK(msg.find("offset 0") != std::string::npos);
  CHECK(msg.find("short.bin") != std::string::npos);

  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> whole(1, 6), extra(1, 3072);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = static_cast<std::size_t>(whole(rng));
    auto bytes = random_records(n, rng);
    bytes.resize(bytes.size() + static_cast<std::size_t>(extra(rng)), 0);
    CHECK(kind_of([&] { parse_cifar10(bytes, "t.bin"); }, &msg) == ErrorKind::format);
    CHECK(msg.find("offset " + std::to_string(n * 3073) + " ") != std::string::npos);
  }
}

TEST_CASE("cifar label byte above 9 is corruption") {
  std::vector<std::uint8_t> bytes(2 * kCifarRecordBytes, 0);
  bytes[kCifarRecordBytes] = 11;
  std::string msg;
  CHECK(kind_of([&] { parse_cifar10(bytes, "bad.bin"); }, &msg) == ErrorKind::corruption);
  CHECK(msg.find("3073") != std::string::npos);
}

TEST_CASE("load_cifar10 reports a missing directory as io") {
  CHECK(kind_of([] { load_cifar10("/nonexistent/cifar-dir"); }) == ErrorKind::io);
}

TEST_CASE("load_cifar10 rejects a batch file of the wrong size") {
  const auto dir = std::filesystem::temp_directory_path() / "sprune_cifar_short";
  std::filesystem::create_directories(dir);
  for (const char* f : {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin",
                        "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"}) {
    std::ofstream(dir / f, std::ios::binary) << std::string(kCifarRecordBytes, '\0');
  }
  CHECK(kind_of([&] { load_cifar10(dir.string()); }) == ErrorKind::format);
  std::filesystem::remove_all(dir);
}

TEST_CASE("validation split has exact per-class counts and is disjoint") {
  SynthSpec spec;
  spec.classes = 10;
  spec.per_class = 60;
  spec.size = 4;
  const Dataset train = synth_dataset(spec, 1);
  auto [rest, val] = make_validation_split(train, 50, 77);
  CHECK(val.size() == 500);
  CHECK(rest.size() == 100);
  CHECK(val.split == Split::val);
  CHECK(rest.split == Split::train);
  std::vector<int> per(10, 0);
  for (int y : val.labels) ++per[static_cast<std::size_t>(y)];
  for (int c : per) CHECK(c == 50);
  std::set<int> a(rest.origin.begin(), rest.origin.end()), b(val.origin.begin(), val.origin.end());
  CHECK(a.size() == 100);
  CHECK(b.size() == 500);
  for (int i : b) CHECK(a.count(i) == 0);
  // copied samples match their origin
  const std::size_t plane = static_cast<std::size_t>(3 * 4 * 4);
  for (int k = 0; k < val.size(); k += 37) {
    const int o = val.origin[static_cast<std::size_t>(k)];
    CHECK(val.labels[static_cast<std::size_t>(k)] == train.labels[static_cast<std::size_t>(o)]);
    CHECK(std::equal(val.images.ptr() + k * plane, val.images.ptr() + (k + 1) * plane,
                     train.images.ptr() + o * plane));
  }
}

TEST_CASE("validation split determinism and edge cases") {
  SynthSpec spec;
  spec.per_class = 20;
  spec.size = 4;
  const Dataset train = synth_dataset(spec, 2);
  auto s1 = make_validation_split(train, 5, 3);
  auto s2 = make_validation_split(train, 5, 3);
  auto s3 = make_validation_split(train, 5, 4);
  CHECK(s1.second.origin == s2.second.origin);
  CHECK(s1.second.origin != s3.second.origin);

  auto none = make_validation_split(train, 0, 3);
  CHECK(none.second.size() == 0);
  CHECK(none.first.size() == train.size());

  CHECK(kind_of([&] { make_validation_split(train, 21, 3); }) == ErrorKind::split);
}

TEST_CASE("expect_split rejects the wrong tag") {
  Dataset d;
  d.split = Split::test;
  CHECK_NOTHROW(expect_split(d, Split::test, "evaluation"));
  std::string msg;
  CHECK(kind_of([&] { expect_split(d, Split::val, "snapshot selection"); }, &msg) == ErrorKind::split);
  CHECK(msg.find("snapshot selection") != std::string::npos);
}

TEST_CASE("synthetic data is deterministic and class-structured") {
  SynthSpec spec;
  spec.per_class = 10;
  const Dataset a = synth_dataset(spec, 5), b = synth_dataset(spec, 5), c = synth_dataset(spec, 6);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK_FALSE(a.images == c.images);

  spec.noise = 0;
  const Dataset clean = synth_dataset(spec, 5);
  const std::size_t plane = clean.images.numel() / static_cast<std::size_t>(clean.size());
  for (int i = spec.classes; i < clean.size(); ++i) {
    const int j = i % spec.classes;
    CHECK(std::equal(clean.images.ptr() + i * plane, clean.images.ptr() + (i + 1) * plane,
                     clean.images.ptr() + j * plane));
  }
  // distinct classes have distinct templates
  CHECK_FALSE(std::equal(clean.images.ptr(), clean.images.ptr() + plane, clean.images.ptr() + plane));
}

TEST_CASE("synth_splits sizes, tags and normalization") {
  SynthSpec spec;
  spec.per_class = 40;
  const DataSplits s = synth_splits(spec, 10, 20, 8);
  CHECK(s.train.size() == 90);
  CHECK(s.val.size() == 30);
  CHECK(s.test.size() == 60);
  CHECK(s.train.split == Split::train);
  CHECK(s.val.split == Split::val);
  CHECK(s.test.split == Split::test);
  const ChannelStats st = channel_stats(s.train);
  for (int c = 0; c < 3; ++c) {
    CHECK(st.mean[static_cast<std::size_t>(c)] == doctest::Approx(0.0).epsilon(1e-4).scale(1));
    CHECK(st.std[static_cast<std::size_t>(c)] == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("augment_batch with zero pad only mirrors") {
  std::mt19937_64 rng(1);
  Tensor t({4, 1, 3, 3});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(i % 9);
  const Tensor before = t;
  augment_batch(t, rng, 0);
  for (int b = 0; b < 4; ++b) {
    const float* p = t.ptr() + b * 9;
    const bool same = std::equal(p, p + 9, before.ptr() + b * 9);
    bool mirrored = true;
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) mirrored &= p[y * 3 + x] == before[static_cast<std::size_t>(b * 9 + y * 3 + 2 - x)];
    CHECK((same || mirrored));
  }
}
