#include "curvlab/data.hpp"

#include "curvlab/random.hpp"

#include <zlib.h>

#include <array>
#include <cmath>
#include <numeric>

namespace curvlab {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

// Reads a whole file; gzip streams are inflated, plain files pass through
// (gzread handles both, but only ".gz" files are expected to be compressed).
std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("no such file: " + path.string());
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw DataError("cannot open " + path.string());
  std::vector<unsigned char> out;
  std::array<unsigned char, 1 << 16> buf{};
  for (;;) {
    const int got = gzread(f, buf.data(), static_cast<unsigned>(buf.size()));
    if (got < 0) {
      gzclose(f);
      throw DataError("read error in " + path.string());
    }
    if (got == 0) break;
    out.insert(out.end(), buf.begin(), buf.begin() + got);
  }
  gzclose(f);
  return out;
}

std::uint32_t be32(const std::vector<unsigned char>& bytes, std::size_t at, const std::filesystem::path& path) {
  if (at + 4 > bytes.size()) throw DataError("truncated IDX header in " + path.string());
  return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) |
         (std::uint32_t{bytes[at + 2]} << 8) | std::uint32_t{bytes[at + 3]};
}

}  // namespace

Dataset Dataset::select(std::span<const Index> columns) const {
  Dataset out = *this;
  out.inputs.resize(inputs.rows(), static_cast<Index>(columns.size()));
  for (std::size_t j = 0; j < columns.size(); ++j) out.inputs.col(static_cast<Index>(j)) = inputs.col(columns[j]);
  out.targets = targets.select(columns);
  return out;
}

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto images = read_all(images_path);
  const auto labels = read_all(labels_path);

  if (be32(images, 0, images_path) != kImageMagic) throw DataError("bad image magic in " + images_path.string());
  if (be32(labels, 0, labels_path) != kLabelMagic) throw DataError("bad label magic in " + labels_path.string());
  const std::uint32_t count = be32(images, 4, images_path);
  const std::uint32_t rows = be32(images, 8, images_path);
  const std::uint32_t cols = be32(images, 12, images_path);
  const std::uint32_t label_count = be32(labels, 4, labels_path);
  if (count != label_count) {
    throw DataError("count mismatch: " + std::to_string(count) + " images vs " + std::to_string(label_count) +
                    " labels");
  }
  const std::size_t pixels = std::size_t{rows} * cols;
  if (images.size() < 16 + std::size_t{count} * pixels) throw DataError("truncated image data in " + images_path.string());
  if (labels.size() < 8 + std::size_t{count}) throw DataError("truncated label data in " + labels_path.string());

  Dataset ds;
  ds.name = images_path.filename().string();
  ds.image_rows = rows;
  ds.image_cols = cols;
  ds.inputs.resize(static_cast<Index>(pixels), count);
  std::vector<int> classes(count);
  int max_label = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    for (std::size_t p = 0; p < pixels; ++p) {
      ds.inputs(static_cast<Index>(p), i) = static_cast<double>(images[16 + i * pixels + p]) / 255.0;
    }
    classes[i] = labels[8 + i];
    max_label = std::max(max_label, classes[i]);
  }
  ds.targets = Targets::from_classes(std::move(classes));
  ds.num_classes = std::max(10, max_label + 1);
  return ds;
}

std::pair<double, double> normalization_constants(const Dataset& ds) {
  const double mean = ds.inputs.mean();
  const double var = (ds.inputs.array() - mean).square().mean();
  return {mean, std::sqrt(var)};
}

Dataset normalize(const Dataset& ds, double mean, double std) {
  if (!(std > 0.0)) throw std::invalid_argument("normalize: std must be positive");
  Dataset out = ds;
  out.inputs = ((ds.inputs.array() - mean) / std).matrix();
  out.norm_mean = mean;
  out.norm_std = std;
  return out;
}

std::vector<Index> permutation(Index n, std::uint64_t seed) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  Rng rng(seed, 0xB7);
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

Dataset subset(const Dataset& ds, Index k, std::uint64_t seed) { return split(ds, k, seed).first; }

std::pair<Dataset, Dataset> split(const Dataset& ds, Index k, std::uint64_t seed) {
  if (k < 0 || k > ds.size()) {
    throw std::invalid_argument("subset size " + std::to_string(k) + " exceeds dataset size " + std::to_string(ds.size()));
  }
  const auto perm = permutation(ds.size(), seed);
  const std::span<const Index> all(perm);
  return {ds.select(all.first(static_cast<std::size_t>(k))), ds.select(all.subspan(static_cast<std::size_t>(k)))};
}

Dataset pool_images(const Dataset& ds, Index factor) {
  if (factor == 1) return ds;
  if (factor < 1 || ds.image_rows == 0 || ds.image_rows % factor != 0 || ds.image_cols % factor != 0) {
    throw std::invalid_argument("pool factor must divide the image size");
  }
  const Index out_rows = ds.image_rows / factor;
  const Index out_cols = ds.image_cols / factor;
  Dataset out = ds;
  out.inputs = Mat::Zero(out_rows * out_cols, ds.size());
  const double w = 1.0 / static_cast<double>(factor * factor);
  for (Index j = 0; j < ds.size(); ++j)
    for (Index r = 0; r < ds.image_rows; ++r)
      for (Index c = 0; c < ds.image_cols; ++c)
        out.inputs((r / factor) * out_cols + c / factor, j) += w * ds.inputs(r * ds.image_cols + c, j);
  out.image_rows = out_rows;
  out.image_cols = out_cols;
  return out;
}

Batcher::Batcher(Index dataset_size, Index batch_size, std::uint64_t seed, bool shuffle)
    : n_(dataset_size), batch_size_(batch_size <= 0 ? dataset_size : batch_size), seed_(seed), shuffle_(shuffle) {
  if (n_ <= 0) throw std::invalid_argument("Batcher: empty dataset");
  if (batch_size_ > n_) {
    throw std::invalid_argument("batch size " + std::to_string(batch_size_) + " exceeds dataset size " +
                                std::to_string(n_));
  }
}

Index Batcher::batches_per_epoch() const { return (n_ + batch_size_ - 1) / batch_size_; }

std::vector<std::vector<Index>> Batcher::epoch(std::int64_t epoch_index) const {
  std::vector<Index> order;
  if (shuffle_ && batch_size_ < n_) {
    order = permutation(n_, derive_seed(seed_, "epoch", static_cast<std::uint64_t>(epoch_index)));
  } else {
    order.resize(static_cast<std::size_t>(n_));
    std::iota(order.begin(), order.end(), Index{0});
  }
  std::vector<std::vector<Index>> out;
  for (Index start = 0; start < n_; start += batch_size_) {
    const Index end = std::min(n_, start + batch_size_);
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  return out;
}

Dataset synth_toy() {
  Dataset ds;
  ds.name = "synth_toy";
  ds.inputs.resize(2, 2);
  ds.inputs << 3.0, 1.0,
               1.0, 0.0;
  Mat y(1, 2);
  y << 1.0, -1.0;
  ds.targets = Targets::from_values(std::move(y));
  return ds;
}

Network synth_toy_network() {
  return Network({Mat::Zero(1, 2)}, Activation::kRelu, LossKind::kSquaredError);
}

Dataset synth_teacher(Index n, Index input_dim, Index classes, std::uint64_t seed) {
  Rng rng(seed, 0x7EAC);
  Dataset ds;
  ds.name = "synth_teacher";
  ds.inputs.resize(input_dim, n);
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < input_dim; ++i) ds.inputs(i, j) = rng.normal();
  const std::array<Index, 3> sizes{input_dim, 2 * input_dim, classes};
  const Network teacher = Network::kaiming(sizes, Activation::kTanh, LossKind::kCrossEntropy, derive_seed(seed, "teacher"));
  const Mat logits = forward(teacher, ds.inputs).outputs();
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index j = 0; j < n; ++j) {
    Index arg = 0;
    logits.col(j).maxCoeff(&arg);
    labels[static_cast<std::size_t>(j)] = static_cast<int>(arg);
  }
  ds.targets = Targets::from_classes(std::move(labels));
  ds.num_classes = classes;
  return ds;
}

}  // namespace curvlab
