#include <gtest/gtest.h>

#include <sstream>
#include <string>

#include "mambastyle/tensor.hpp"

using namespace mambastyle;

TEST(Tensor, ShapeAndSize) {
  Tensor t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_THROW(Tensor(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Tensor, ScalarAndReshape) {
  auto s = Tensor::scalar(3.5f);
  EXPECT_FLOAT_EQ(s.item(), 3.5f);
  Tensor t(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  auto r = t.reshaped(Shape{3, 2});
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(r.vec(), t.vec());
  EXPECT_THROW(t.reshaped(Shape{4, 2}), ShapeError);
}

TEST(Tensor, SeededRandomIsReproducible) {
  Rng a(42), b(42), c(43);
  auto x = Tensor::randn(Shape{64}, a);
  auto y = Tensor::randn(Shape{64}, b);
  auto z = Tensor::randn(Shape{64}, c);
  EXPECT_TRUE(x.identical(y));
  EXPECT_FALSE(x.identical(z));
}

TEST(Tensor, SplitStreamsDiffer) {
  Rng root(5);
  Rng s1 = root.split(1), s2 = root.split(2);
  EXPECT_NE(s1.next_u64(), s2.next_u64());
}

TEST(Tensor, FiniteCheck) {
  Tensor t(Shape{3}, std::vector<float>{1, 2, 3});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
}

TEST(Blob, RoundTripIsBitwise) {
  Rng rng(1);
  auto t = Tensor::randn(Shape{3, 5, 7}, rng);
  std::stringstream ss;
  write_blob(ss, t);
  auto back = read_blob(ss);
  EXPECT_TRUE(t.identical(back));
}

TEST(Blob, HeaderLayout) {
  Tensor t(Shape{2, 1}, std::vector<float>{1.0f, -2.0f});
  std::stringstream ss;
  write_blob(ss, t);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 8u + 4u + 2u * 4u + 2u * 4u);
  EXPECT_EQ(bytes.substr(0, 8), "MSTNSR01");
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 2u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 1u);
  // 1.0f little-endian = 00 00 80 3f
  EXPECT_EQ(static_cast<unsigned char>(bytes[23]), 0x3fu);
}

TEST(Blob, RejectsBadInput) {
  std::stringstream bad("NOTABLOB....");
  EXPECT_THROW(read_blob(bad), CorruptionError);

  Tensor t(Shape{4}, 1.0f);
  std::stringstream ss;
  write_blob(ss, t);
  std::string bytes = ss.str();
  std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_blob(truncated), CorruptionError);

  bytes[7] = '9';
  std::stringstream version(bytes);
  EXPECT_THROW(read_blob(version), VersionError);
}
