// Dataset providers: synthetic Gaussian-mixture classification tasks, a
// small binary image format, minibatch sampling without replacement, and
// label-preserving stochastic augmentation.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mergelab/rng.hpp"
#include "mergelab/tensor.hpp"

namespace mergelab {

template <class S>
struct Dataset {
  Tensor<S> inputs;            // [N,F] vectors or [N,C,H,W] images
  std::vector<int> labels;
  int classes = 0;
  std::string split;           // "train" | "test"
  int task_id = 0;

  Index size() const { return inputs.rank() ? inputs.shape[0] : 0; }
  bool is_image() const { return inputs.rank() == 4; }

  Shape sample_shape() const {
    Shape s(inputs.shape.begin() + 1, inputs.shape.end());
    return s;
  }
};

template <class S>
struct SyntheticTask {
  Dataset<S> train;
  Dataset<S> test;
};

// Gaussian-mixture task: `classes` cluster centers drawn per (task_id, seed)
// uniformly on the unit sphere scaled by 3; samples are N(center, 0.5^2 I).
// Labels cycle through the classes so splits are balanced by construction.
template <class S>
SyntheticTask<S> make_synthetic(int task_id, Index n_train, Index n_test, int classes,
                                Index input_dim, std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("make_synthetic: need at least 2 classes");
  if (n_train < 0 || n_test < 0 || input_dim <= 0)
    throw std::invalid_argument("make_synthetic: sizes must be positive");
  Rng rng(stream_seed(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(task_id + 1)),
                      "synthetic"));
  std::vector<VectorX<double>> centers(classes);
  for (int c = 0; c < classes; ++c) {
    VectorX<double> dir(input_dim);
    for (Index i = 0; i < input_dim; ++i) dir(i) = rng.normal();
    const double norm = dir.norm();
    centers[c] = 3.0 * dir / (norm > 0 ? norm : 1.0);
  }
  auto draw = [&](Index n, const char* split) {
    Dataset<S> ds;
    ds.classes = classes;
    ds.split = split;
    ds.task_id = task_id;
    ArrayX<S> vals(n * input_dim);
    ds.labels.resize(n);
    for (Index i = 0; i < n; ++i) {
      const int label = static_cast<int>(i % classes);
      ds.labels[i] = label;
      for (Index j = 0; j < input_dim; ++j)
        vals(i * input_dim + j) = static_cast<S>(centers[label](j) + 0.5 * rng.normal());
    }
    ds.inputs = Tensor<S>({n, input_dim}, std::move(vals));
    return ds;
  };
  SyntheticTask<S> task;
  task.train = draw(n_train, "train");
  task.test = draw(n_test, "test");
  return task;
}

// --- Image binary format -----------------------------------------------------
// Little-endian: magic "MLAB", version u32=1, count u32, channels u32,
// height u32, width u32, then `count` records of [label u8][C*H*W pixels u8].
// Pixels map to [0,1] by /255.

constexpr char kImageMagic[4] = {'M', 'L', 'A', 'B'};

struct ImageSet {
  std::uint32_t channels = 0, height = 0, width = 0;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;  // count * C*H*W
};

inline void write_image_binary(const std::string& path, const ImageSet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  auto put_u32 = [&](std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  out.write(kImageMagic, 4);
  put_u32(1);
  put_u32(static_cast<std::uint32_t>(set.labels.size()));
  put_u32(set.channels);
  put_u32(set.height);
  put_u32(set.width);
  const std::size_t rec = static_cast<std::size_t>(set.channels) * set.height * set.width;
  for (std::size_t i = 0; i < set.labels.size(); ++i) {
    out.write(reinterpret_cast<const char*>(&set.labels[i]), 1);
    out.write(reinterpret_cast<const char*>(set.pixels.data() + i * rec),
              static_cast<std::streamsize>(rec));
  }
  if (!out) throw std::runtime_error("short write to " + path);
}

template <class S>
Dataset<S> read_image_binary(const std::string& path, int classes, const std::string& split = "train") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::size_t offset = 0;
  auto fail = [&](const std::string& what) {
    throw std::runtime_error(path + ": " + what + " at byte offset " + std::to_string(offset));
  };
  auto get = [&](void* dst, std::size_t n, const char* what) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) fail(std::string("truncated ") + what);
    offset += n;
  };
  auto get_u32 = [&](const char* what) {
    unsigned char b[4];
    get(b, 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  };

  char magic[4];
  get(magic, 4, "magic");
  if (std::memcmp(magic, kImageMagic, 4) != 0) {
    offset = 0;
    fail("bad magic");
  }
  const std::uint32_t version = get_u32("version");
  if (version != 1) fail("unsupported version " + std::to_string(version));
  const std::uint32_t count = get_u32("count");
  const std::uint32_t channels = get_u32("channels");
  const std::uint32_t height = get_u32("height");
  const std::uint32_t width = get_u32("width");
  if (channels == 0 || height == 0 || width == 0) fail("zero image extent");

  const std::size_t rec = static_cast<std::size_t>(channels) * height * width;
  Dataset<S> ds;
  ds.classes = classes;
  ds.split = split;
  ds.labels.resize(count);
  ArrayX<S> vals(static_cast<Index>(count * rec));
  std::vector<std::uint8_t> buf(rec);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint8_t label;
    get(&label, 1, "label");
    if (static_cast<int>(label) >= classes) {
      offset -= 1;  // point at the offending byte
      fail("label " + std::to_string(label) + " out of range [0," + std::to_string(classes) + ")");
    }
    ds.labels[i] = label;
    get(buf.data(), rec, "pixel record");
    for (std::size_t p = 0; p < rec; ++p)
      vals(static_cast<Index>(i * rec + p)) = static_cast<S>(buf[p]) / S(255);
  }
  ds.inputs = Tensor<S>({static_cast<Index>(count), static_cast<Index>(channels),
                         static_cast<Index>(height), static_cast<Index>(width)},
                        std::move(vals));
  return ds;
}

// --- Minibatch sampling ------------------------------------------------------

// Epoch-based sampling without replacement. The permutation for each epoch is
// drawn from the owned stream at the epoch boundary, so a stream state saved
// at a boundary replays the remaining schedule exactly. The last short batch
// of an epoch is kept.
class BatchSampler {
 public:
  BatchSampler(Index n, Index batch, Rng stream) : n_(n), batch_(batch), rng_(stream) {
    if (batch < 1) throw std::invalid_argument("sample_batch: batch size must be >= 1");
    if (batch > n)
      throw std::invalid_argument("sample_batch: batch " + std::to_string(batch) +
                                  " exceeds dataset size " + std::to_string(n));
    order_.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) order_[static_cast<std::size_t>(i)] = i;
    pos_ = n;  // force reshuffle on first batch
  }

  Index steps_per_epoch() const { return (n_ + batch_ - 1) / batch_; }
  bool at_epoch_boundary() const { return pos_ >= n_; }
  const Rng& stream() const { return rng_; }
  void set_stream(const Rng& r) { rng_ = r; }

  std::vector<Index> next() {
    if (pos_ >= n_) {
      // The epoch permutation is a pure function of the stream state:
      // Fisher-Yates from the identity arrangement every epoch.
      for (Index i = 0; i < n_; ++i) order_[static_cast<std::size_t>(i)] = i;
      for (Index i = n_ - 1; i > 0; --i) {
        const Index j = static_cast<Index>(rng_.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(order_[static_cast<std::size_t>(i)], order_[static_cast<std::size_t>(j)]);
      }
      pos_ = 0;
    }
    const Index take = std::min(batch_, n_ - pos_);
    std::vector<Index> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                           order_.begin() + static_cast<std::ptrdiff_t>(pos_ + take));
    pos_ += take;
    return out;
  }

 private:
  Index n_, batch_, pos_;
  Rng rng_;
  std::vector<Index> order_;
};

template <class S>
struct Batch {
  Tensor<S> x;
  std::vector<int> y;
};

template <class S>
Batch<S> gather_batch(const Dataset<S>& ds, const std::vector<Index>& idx) {
  Shape sample = ds.sample_shape();
  const Index per = numel(sample);
  Shape out_shape;
  out_shape.push_back(static_cast<Index>(idx.size()));
  out_shape.insert(out_shape.end(), sample.begin(), sample.end());
  ArrayX<S> vals(static_cast<Index>(idx.size()) * per);
  Batch<S> b;
  b.y.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    vals.segment(static_cast<Index>(i) * per, per) = ds.inputs.v.segment(idx[i] * per, per);
    b.y[i] = ds.labels[static_cast<std::size_t>(idx[i])];
  }
  b.x = Tensor<S>(std::move(out_shape), std::move(vals));
  return b;
}

// --- Augmentation ------------------------------------------------------------

struct AugmentSpec {
  bool enabled = false;
  double flip_prob = 0.5;     // images: horizontal flip probability
  int crop_pad = 4;           // images: random-crop zero padding
  double jitter_sigma = 0.1;  // vectors: additive Gaussian input noise

  bool operator==(const AugmentSpec&) const = default;
};

// Per-sample independent transforms; labels untouched; the disabled spec is
// the identity. Stream consumption depends only on the spec and batch shape,
// never on data values, so replaying the stream replays the batch.
template <class S>
Tensor<S> augment(const Tensor<S>& x, const AugmentSpec& spec, Rng& rng) {
  if (!spec.enabled) return x;
  if (x.rank() == 2) {
    if (spec.jitter_sigma < 0) throw std::invalid_argument("augment: negative jitter sigma");
    Tensor<S> out = x.detached();
    if (spec.jitter_sigma == 0) return out;
    for (Index i = 0; i < out.size(); ++i)
      out.v(i) += static_cast<S>(spec.jitter_sigma * rng.normal());
    return out;
  }
  if (x.rank() != 4)
    throw std::invalid_argument("augment: expected [N,F] or [N,C,H,W], got " + shape_str(x.shape));
  const Index n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  const int pad = spec.crop_pad;
  if (pad >= h || pad >= w)
    throw std::invalid_argument("augment: crop pad " + std::to_string(pad) +
                                " must be smaller than image sides " + shape_str(x.shape));
  Tensor<S> out = Tensor<S>::zeros(x.shape);
  for (Index i = 0; i < n; ++i) {
    const bool flip = spec.flip_prob > 0 && rng.uniform() < spec.flip_prob;
    Index dy = 0, dx = 0;
    if (pad > 0) {
      dy = static_cast<Index>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
      dx = static_cast<Index>(rng.below(static_cast<std::uint64_t>(2 * pad + 1))) - pad;
    }
    for (Index ch = 0; ch < c; ++ch)
      for (Index y = 0; y < h; ++y)
        for (Index xx = 0; xx < w; ++xx) {
          const Index sy = y + dy;
          Index sx = xx + dx;
          if (flip) sx = w - 1 - sx;
          S value = S(0);
          if (sy >= 0 && sy < h && sx >= 0 && sx < w)
            value = x.v(((i * c + ch) * h + sy) * w + sx);
          out.v(((i * c + ch) * h + y) * w + xx) = value;
        }
  }
  return out;
}

}  // namespace mergelab
