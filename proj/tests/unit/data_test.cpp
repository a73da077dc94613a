#include "curvlab/data.hpp"
#include "curvlab/optimizers.hpp"
#include "support.hpp"

#include <gtest/gtest.h>
#include <zlib.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

namespace curvlab {
namespace {

namespace fs = std::filesystem;
using Bytes = std::vector<unsigned char>;

void put32(Bytes& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

// Four 2×2 images: image i has every pixel equal to 60·i (last one 255).
Bytes image_file(std::uint32_t magic = 0x803, std::uint32_t count = 4, std::size_t drop = 0) {
  Bytes b;
  put32(b, magic);
  put32(b, count);
  put32(b, 2);
  put32(b, 2);
  for (int i = 0; i < 4; ++i)
    for (int p = 0; p < 4; ++p) b.push_back(static_cast<unsigned char>(i == 3 ? 255 : 60 * i + p));
  b.resize(b.size() - drop);
  return b;
}

Bytes label_file(std::uint32_t count = 4) {
  Bytes b;
  put32(b, 0x801);
  put32(b, count);
  for (unsigned char l : {3, 1, 4, 1}) b.push_back(l);
  return b;
}

class IdxFiles : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("curvlab_idx_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                        "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const Bytes& bytes) {
    const fs::path p = dir_ / name;
    if (p.extension() == ".gz") {
      gzFile f = gzopen(p.c_str(), "wb");
      gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
      gzclose(f);
    } else {
      std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(bytes.data()),
                                              static_cast<std::streamsize>(bytes.size()));
    }
    return p;
  }

  fs::path dir_;
};

TEST_F(IdxFiles, PlainFilesParse) {
  const Dataset ds = load_idx(write("img", image_file()), write("lbl", label_file()));
  ASSERT_EQ(ds.size(), 4);
  EXPECT_EQ(ds.input_dim(), 4);
  EXPECT_EQ(ds.image_rows, 2);
  EXPECT_EQ(ds.targets.classes, (std::vector<int>{3, 1, 4, 1}));
  EXPECT_DOUBLE_EQ(ds.inputs(1, 1), 61.0 / 255.0);
  EXPECT_DOUBLE_EQ(ds.inputs(2, 3), 1.0);
  EXPECT_EQ(ds.num_classes, 10);
}

TEST_F(IdxFiles, GzipFilesParseIdentically) {
  const Dataset plain = load_idx(write("img", image_file()), write("lbl", label_file()));
  const Dataset gz = load_idx(write("img.gz", image_file()), write("lbl.gz", label_file()));
  EXPECT_EQ(plain.inputs, gz.inputs);
  EXPECT_EQ(plain.targets.classes, gz.targets.classes);
}

TEST_F(IdxFiles, BadMagicIsRejected) {
  EXPECT_THROW(load_idx(write("img", image_file(0x801)), write("lbl", label_file())), DataError);
}

TEST_F(IdxFiles, TruncatedImagesAreRejected) {
  try {
    load_idx(write("img", image_file(0x803, 4, 3)), write("lbl", label_file()));
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST_F(IdxFiles, CountMismatchIsRejected) {
  EXPECT_THROW(load_idx(write("img", image_file(0x803, 3)), write("lbl", label_file())), DataError);
}

TEST_F(IdxFiles, MissingFileIsRejected) {
  EXPECT_THROW(load_idx(dir_ / "nope", write("lbl", label_file())), DataError);
}

#ifdef CURVLAB_TEST_DATA_DIR
TEST(Mnist, BundledSubsetLoads) {
  const fs::path dir = CURVLAB_TEST_DATA_DIR;
  const Dataset ds = load_idx(dir / "train-images-idx3-ubyte.gz", dir / "train-labels-idx1-ubyte.gz");
  EXPECT_EQ(ds.size(), 5000);
  EXPECT_EQ(ds.input_dim(), 784);
  EXPECT_GE(ds.inputs.minCoeff(), 0.0);
  EXPECT_LE(ds.inputs.maxCoeff(), 1.0);
  const std::set<int> labels(ds.targets.classes.begin(), ds.targets.classes.end());
  EXPECT_EQ(labels.size(), 10u);
}
#endif

Dataset column_dataset(Index n) {
  Dataset ds;
  ds.inputs = Mat(1, n);
  std::vector<int> labels;
  for (Index i = 0; i < n; ++i) {
    ds.inputs(0, i) = static_cast<double>(i);
    labels.push_back(static_cast<int>(i % 10));
  }
  ds.targets = Targets::from_classes(labels);
  ds.num_classes = 10;
  return ds;
}

TEST(Normalize, IdentityConstantsLeaveDataUnchanged) {
  const Dataset ds = column_dataset(5);
  EXPECT_EQ(normalize(ds, 0.0, 1.0).inputs, ds.inputs);
  const auto [mean, sd] = normalization_constants(ds);
  const Dataset n = normalize(ds, mean, sd);
  EXPECT_NEAR(n.inputs.mean(), 0.0, 1e-14);
  EXPECT_NEAR(n.inputs.array().square().mean(), 1.0, 1e-14);
  EXPECT_THROW(normalize(ds, 0.0, 0.0), std::invalid_argument);
}

TEST(Subset, DrawsDistinctExamplesDeterministically) {
  const Dataset ds = column_dataset(50);
  const Dataset a = subset(ds, 20, 7);
  EXPECT_EQ(a.inputs, subset(ds, 20, 7).inputs);
  EXPECT_NE(a.inputs, subset(ds, 20, 8).inputs);
  std::set<double> seen(a.inputs.data(), a.inputs.data() + a.inputs.size());
  EXPECT_EQ(seen.size(), 20u);
  for (Index j = 0; j < a.size(); ++j) {
    EXPECT_EQ(a.targets.classes[static_cast<std::size_t>(j)], static_cast<int>(a.inputs(0, j)) % 10);
  }
  EXPECT_THROW(subset(ds, 51, 0), std::invalid_argument);
}

TEST(Split, PartsAreDisjointAndCoverDataset) {
  const Dataset ds = column_dataset(30);
  const auto [a, b] = split(ds, 12, 3);
  EXPECT_EQ(a.size() + b.size(), 30);
  std::set<double> all(a.inputs.data(), a.inputs.data() + a.size());
  all.insert(b.inputs.data(), b.inputs.data() + b.size());
  EXPECT_EQ(all.size(), 30u);
}

TEST(Permutation, IsAPermutation) {
  auto p = permutation(100, 4);
  std::sort(p.begin(), p.end());
  for (Index i = 0; i < 100; ++i) EXPECT_EQ(p[static_cast<std::size_t>(i)], i);
}

TEST(Batcher, ThousandByHundredGivesTenBatchesCoveringAll) {
  const Batcher b(1000, 100, 1);
  EXPECT_EQ(b.batches_per_epoch(), 10);
  const auto epoch = b.epoch(0);
  ASSERT_EQ(epoch.size(), 10u);
  std::set<Index> seen;
  for (const auto& batch : epoch) {
    EXPECT_EQ(batch.size(), 100u);
    seen.insert(batch.begin(), batch.end());
  }
  EXPECT_EQ(seen.size(), 1000u);
  EXPECT_NE(b.epoch(0), b.epoch(1));
  EXPECT_EQ(b.epoch(2), Batcher(1000, 100, 1).epoch(2));
}

TEST(Batcher, KeepsShortLastBatchAndFullBatchMode) {
  const Batcher b(25, 10, 0);
  const auto epoch = b.epoch(0);
  ASSERT_EQ(epoch.size(), 3u);
  EXPECT_EQ(epoch.back().size(), 5u);
  EXPECT_EQ(Batcher(25, 0, 0).epoch(0).size(), 1u);
  EXPECT_THROW(Batcher(10, 11, 0), std::invalid_argument);
}

TEST(Pool, AveragesBlocks) {
  Dataset ds;
  ds.image_rows = 2;
  ds.image_cols = 2;
  ds.inputs = Mat(4, 1);
  ds.inputs << 1, 2, 3, 6;
  ds.targets = Targets::from_classes({0});
  const Dataset p = pool_images(ds, 2);
  EXPECT_EQ(p.input_dim(), 1);
  EXPECT_DOUBLE_EQ(p.inputs(0, 0), 3.0);
  EXPECT_THROW(pool_images(ds, 3), std::invalid_argument);
  EXPECT_EQ(pool_images(ds, 1).inputs, ds.inputs);
}

TEST(SynthToy, FullBatchSgdDirection) {
  const Dataset toy = synth_toy();
  const Network net = synth_toy_network();
  BatchTrace trace = forward(net, toy.inputs);
  const auto grads = backward(net, trace, toy.targets);
  Mat expected(1, 2);
  expected << 2, 1;
  EXPECT_TRUE(testing::MatNear(-static_cast<double>(toy.size()) * grads[0], expected, 1e-12));
  EXPECT_DOUBLE_EQ(loss(net, toy.inputs, toy.targets), 0.5);
}

TEST(SynthTeacher, LabelsComeFromTeacherArgmax) {
  const Dataset ds = synth_teacher(200, 5, 3, 9);
  EXPECT_EQ(ds.size(), 200);
  EXPECT_EQ(ds.num_classes, 3);
  std::set<int> labels(ds.targets.classes.begin(), ds.targets.classes.end());
  EXPECT_GE(labels.size(), 2u);
  EXPECT_EQ(synth_teacher(200, 5, 3, 9).inputs, ds.inputs);
}

}  // namespace
}  // namespace curvlab
