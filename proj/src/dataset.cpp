#include "cdl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "cdl/rng.hpp"

namespace cdl::data {

void Dataset::fill_sample(std::int64_t i, net::Tensor& out) const {
  const std::int64_t n = static_cast<std::int64_t>(rows) * cols;
  if (out.data.size() != static_cast<std::size_t>(n)) {
    out.shape = sample_shape();
    out.data.resize(static_cast<std::size_t>(n));
  }
  const float* src = images.data() + i * n;
  for (std::int64_t k = 0; k < n; ++k) out.data[static_cast<std::size_t>(k)] = src[k];
}

namespace {

std::uint32_t read_be32(std::istream& is) {
  std::uint8_t b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("idx: truncated header");
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace

Dataset load_mnist_idx(const std::string& dir, bool train, std::int64_t limit) {
  const std::string img_path =
      dir + (train ? "/train-images-idx3-ubyte" : "/t10k-images-idx3-ubyte");
  const std::string lbl_path =
      dir + (train ? "/train-labels-idx1-ubyte" : "/t10k-labels-idx1-ubyte");
  std::ifstream img(img_path, std::ios::binary), lbl(lbl_path, std::ios::binary);
  if (!img || !lbl)
    throw std::runtime_error("mnist: missing " + img_path + " or " + lbl_path);
  if (read_be32(img) != 0x803) throw std::runtime_error("mnist: bad image magic");
  std::int64_t n = read_be32(img);
  Dataset d;
  d.rows = static_cast<int>(read_be32(img));
  d.cols = static_cast<int>(read_be32(img));
  if (read_be32(lbl) != 0x801) throw std::runtime_error("mnist: bad label magic");
  if (static_cast<std::int64_t>(read_be32(lbl)) != n)
    throw std::runtime_error("mnist: image/label count mismatch");
  if (limit > 0) n = std::min(n, limit);
  d.count = n;
  d.classes = 10;
  const std::int64_t pixels = n * d.rows * d.cols;
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(pixels));
  img.read(reinterpret_cast<char*>(raw.data()), pixels);
  if (!img) throw std::runtime_error("mnist: truncated images");
  d.images.resize(static_cast<std::size_t>(pixels));
  for (std::int64_t i = 0; i < pixels; ++i)
    d.images[static_cast<std::size_t>(i)] = static_cast<float>(raw[static_cast<std::size_t>(i)]) / 255.0f;
  d.labels.resize(static_cast<std::size_t>(n));
  lbl.read(reinterpret_cast<char*>(d.labels.data()), n);
  if (!lbl) throw std::runtime_error("mnist: truncated labels");
  return d;
}

Dataset make_synthetic(std::int64_t count, int classes, std::uint64_t seed, bool train_split) {
  constexpr int kSize = 28;
  constexpr int kBlobs = 3;
  Dataset d;
  d.rows = d.cols = kSize;
  d.classes = classes;
  d.count = count;
  d.images.resize(static_cast<std::size_t>(count) * kSize * kSize);
  d.labels.resize(static_cast<std::size_t>(count));

  // Class geometry is shared between splits; only the per-sample noise stream
  // differs, so train and test are draws from the same distribution.
  struct Blob {
    double cx, cy, r, amp;
  };
  std::vector<std::vector<Blob>> geometry(static_cast<std::size_t>(classes));
  for (int c = 0; c < classes; ++c) {
    Rng rg(Rng::mix({seed, 0x67656f6du, static_cast<std::uint64_t>(c)}));
    for (int b = 0; b < kBlobs; ++b) {
      Blob bl;
      bl.cx = rg.uniform(5.0, kSize - 5.0);
      bl.cy = rg.uniform(5.0, kSize - 5.0);
      bl.r = rg.uniform(2.0, 4.5);
      bl.amp = rg.uniform(0.6, 1.0);
      geometry[static_cast<std::size_t>(c)].push_back(bl);
    }
  }

  const std::uint64_t split_tag = train_split ? 0x7472u : 0x7465u;
  for (std::int64_t i = 0; i < count; ++i) {
    const int c = static_cast<int>(i % classes);
    d.labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(c);
    Rng rg(Rng::mix({seed, split_tag, static_cast<std::uint64_t>(i)}));
    float* px = d.images.data() + i * kSize * kSize;
    // jittered copies of the class blobs
    std::vector<Blob> blobs = geometry[static_cast<std::size_t>(c)];
    for (Blob& b : blobs) {
      b.cx += 1.2 * rg.normal();
      b.cy += 1.2 * rg.normal();
    }
    for (int y = 0; y < kSize; ++y) {
      for (int x = 0; x < kSize; ++x) {
        double v = 0.0;
        for (const Blob& b : blobs) {
          const double dx = x - b.cx, dy = y - b.cy;
          v += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.r * b.r));
        }
        v += 0.12 * rg.normal();
        px[y * kSize + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return d;
}

DatasetPair load_dataset(const std::string& spec) {
  std::string kind = spec;
  std::string rest;
  if (const auto pos = spec.find(':'); pos != std::string::npos) {
    kind = spec.substr(0, pos);
    rest = spec.substr(pos + 1);
  }
  std::map<std::string, std::string> kv;
  {
    std::stringstream ss(rest);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos)
        kv["_"] = item;  // positional (mnist dir)
      else
        kv[item.substr(0, eq)] = item.substr(eq + 1);
    }
  }
  auto geti = [&](const std::string& k, std::int64_t def) {
    auto it = kv.find(k);
    return it == kv.end() ? def : std::stoll(it->second);
  };

  DatasetPair p;
  if (kind == "synthetic") {
    const std::int64_t ntr = geti("train", 3000);
    const std::int64_t nte = geti("test", 1000);
    const int classes = static_cast<int>(geti("classes", 10));
    const std::uint64_t seed = static_cast<std::uint64_t>(geti("seed", 7));
    p.train = make_synthetic(ntr, classes, seed, true);
    p.test = make_synthetic(nte, classes, seed, false);
    p.description = "synthetic(train=" + std::to_string(ntr) + ",test=" + std::to_string(nte) +
                    ",classes=" + std::to_string(classes) + ",seed=" + std::to_string(seed) + ")";
  } else if (kind == "mnist") {
    std::string dir = kv.count("_") ? kv["_"] : (kv.count("dir") ? kv["dir"] : "");
    if (dir.empty()) {
      const char* env = std::getenv("CDL_DATA_DIR");
      if (env == nullptr)
        throw std::runtime_error("mnist: pass mnist:<dir> or set CDL_DATA_DIR");
      dir = env;
    }
    p.train = load_mnist_idx(dir, true, geti("train", 0));
    p.test = load_mnist_idx(dir, false, geti("test", 0));
    p.description = "mnist(" + dir + ")";
  } else {
    throw std::runtime_error("unknown dataset spec: " + spec);
  }
  return p;
}

}  // namespace cdl::data
