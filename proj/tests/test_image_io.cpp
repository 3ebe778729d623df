#include <gtest/gtest.h>

#include "realcustom/image_io.hpp"
#include "realcustom/oracles.hpp"
#include "realcustom/trace_io.hpp"

using namespace realcustom;

TEST(ImageIo, ByteQuantisation) {
  EXPECT_EQ(to_byte(-0.2), 0);
  EXPECT_EQ(to_byte(1.7), 255);
  EXPECT_EQ(to_byte(0.5), 128);
  EXPECT_EQ(mask_byte(0.0), 0);
  EXPECT_EQ(mask_byte(1e-4), 1);
  EXPECT_EQ(mask_byte(1.0), 255);
}

TEST(ImageIo, PpmRoundTripOfQuantisedImage) {
  Rng rng(1);
  Tensor img({3, 5, 7});
  for (auto& v : img.data()) v = static_cast<float>(rng.below(256)) / 255.0f;
  const auto bytes = encode_ppm(img);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 2), "P6");
  const auto back = decode_ppm(bytes);
  EXPECT_EQ(back.shape(), img.shape());
  EXPECT_LE(max_abs_diff(back, img), 1e-6);
  EXPECT_EQ(encode_ppm(back), bytes);
}

TEST(ImageIo, ParsesCommentsAndRejectsGarbage) {
  const std::string text = "P6\n# comment\n1 1\n255\n";
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  bytes.insert(bytes.end(), {255, 0, 128});
  const auto img = decode_ppm(bytes);
  EXPECT_EQ(img.at(0, 0, 0), 1.0f);
  EXPECT_EQ(img.at(1, 0, 0), 0.0f);
  bytes.pop_back();
  EXPECT_THROW(decode_ppm(bytes), FormatError);
  EXPECT_THROW(decode_ppm(std::vector<std::uint8_t>{'P', '5'}), FormatError);
}

TEST(ImageIo, PgmKeepsMaskSupport) {
  Rng rng(2);
  auto m = rng.uniform_tensor<float>({6, 6}, 0.0, 1.0);
  for (std::size_t i = 0; i < m.size(); i += 3) m[i] = 0.0f;
  m[1] = 1e-5f;
  const auto bytes = decode_pgm_bytes(encode_pgm(m));
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(bytes[i] != 0.0f, m[i] != 0.0f);
}

TEST(TraceIo, SummaryMatchesIndependentIouOracle) {
  namespace fs = std::filesystem;
  const auto dir = (fs::temp_directory_path() / "rc_trace_test").string();
  fs::remove_all(dir);
  Rng rng(3);
  CustomizeTrace trace;
  for (int s = 0; s < 6; ++s) {
    auto m = rng.uniform_tensor<float>({8, 8}, 0.0, 1.0);
    trace.masks.push_back({max_normalize(topk_select(m, 0.25))});
  }
  trace.masks.push_back(trace.masks.back());
  write_mask_trace(dir, trace);
  const auto stats = summarize_mask_trace(dir);
  ASSERT_EQ(stats.size(), 7u);
  EXPECT_FALSE(stats[0].iou.has_value());
  for (std::size_t s = 0; s < 7; ++s) {
    EXPECT_EQ(stats[s].support, 16u);
    EXPECT_EQ(stats[s].max, 1.0);
    if (s) {
      EXPECT_DOUBLE_EQ(*stats[s].iou, oracle::iou_oracle(trace.masks[s - 1][0], trace.masks[s][0]));
    }
  }
  EXPECT_EQ(*stats[6].iou, 1.0);

  // A shorter re-run replaces the old files.
  trace.masks.resize(2);
  write_mask_trace(dir, trace);
  EXPECT_EQ(summarize_mask_trace(dir).size(), 2u);
  fs::remove_all(dir);
  EXPECT_THROW(summarize_mask_trace(dir), SemanticError);
}
