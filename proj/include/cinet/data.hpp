#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cinet/error.hpp"
#include "cinet/rng.hpp"
#include "cinet/tensor.hpp"

namespace cinet {

// Synthetic fine-grained task: every superclass has its own global texture,
// and the subclasses of a superclass differ only by which small glyph is
// stamped somewhere inside the image. The glyph shape is the only evidence
// separating subclasses; its position is random and uninformative.
struct SyntheticTaskConfig {
  int num_superclasses = 2;
  int subclasses_per_superclass = 4;
  int image_size = 32;
  int glyph_size = 5;
  double noise_std = 0.05;
  int train_per_class = 50;
  int val_per_class = 20;
  bool hflip = false;
  std::uint64_t seed = 7;

  int num_classes() const { return num_superclasses * subclasses_per_superclass; }

  void validate() const {
    if (num_superclasses < 1) throw ConfigError("num_superclasses must be >= 1");
    if (subclasses_per_superclass < 1 || subclasses_per_superclass > 8) {
      throw ConfigError("subclasses_per_superclass must be in [1, 8]");
    }
    if (image_size < 8) throw ConfigError("image_size must be >= 8");
    if (glyph_size < 3) throw ConfigError("glyph_size must be >= 3");
    if (glyph_size > image_size - 2) {
      throw ConfigError("glyph_size " + std::to_string(glyph_size) +
                        " does not fit in image_size " + std::to_string(image_size) +
                        " with margin 1");
    }
    if (noise_std < 0) throw ConfigError("noise_std must be >= 0");
    if (train_per_class < 1 || val_per_class < 1) {
      throw ConfigError("per-class sample counts must be >= 1");
    }
  }
};

struct LabeledImage {
  Tensor pixels;  // [H, W, 3] in [0, 1]
  int class_id = 0;
  int superclass_id = 0;
};

struct Dataset {
  SyntheticTaskConfig config;
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> val;
};

namespace detail_data {

// Subclass glyphs are two color-coded strokes whose per-channel pixel masses
// match within a family; only the arrangement differs. Crossing strokes
// share one pixel, rendered white (all channels), while parallel strokes
// never meet. Pooled per-channel statistics are nearly blind to the
// arrangement; channel co-occurrence at the crossing is not.
// Returns a channel bitmask (1=red stroke, 2=green, 4=blue) for a glyph cell.
inline int glyph_mask(int shape, int r, int q, int g) {
  int mid = g / 2;
  int mask = 0;
  switch (shape % 8) {
    case 0:  // crossing horizontal/vertical strokes
      mask = (r == mid ? 1 : 0) | (q == mid ? 2 : 0);
      break;
    case 1:  // the same two strokes, parallel
      mask = (r == mid - 1 ? 1 : 0) | (r == mid + 1 ? 2 : 0);
      break;
    case 2:  // crossing diagonals
      mask = (r == q ? 4 : 0) | (r + q == g - 1 ? 1 : 0);
      break;
    case 3:  // offset diagonals, no crossing
      mask = (r == q ? 4 : 0) | (r + q == g - 2 ? 1 : 0);
      break;
    case 4: return r == mid ? 7 : 0;                     // dash
    case 5: return q == mid ? 7 : 0;                     // bar
    case 6: return (r + q) % 2 == 0 ? 7 : 0;             // checker
    case 7: return (r >= mid && q >= mid) ? 7 : 0;       // corner block
  }
  // a stroke crossing is a white dot
  bool both = (mask & 3) == 3 || (mask & 5) == 5 || (mask & 6) == 6;
  return both ? 7 : mask;
}

// Superclass texture: a binary per-channel offset code (pooled statistics
// separate superclasses easily) plus an oriented sinusoid for local
// structure.
inline double texture_value(int superclass, int channel, int r, int q, int image_size) {
  double base = 0.18 + 0.30 * static_cast<double>((superclass >> channel) & 1);
  double theta = 2.39996322972865332 * (superclass + 1);
  double cx = std::cos(theta);
  double cy = std::sin(theta);
  double cycles = 3.0 + static_cast<double>(superclass % 3);
  double phase = channel * 2.0943951023931953;  // 2*pi/3 per channel
  double arg = 6.283185307179586 * cycles * (cx * q + cy * r) / image_size + phase;
  return base + 0.02 * std::sin(arg);
}

inline LabeledImage render(const SyntheticTaskConfig& cfg, int class_id, Rng& rng) {
  int n = cfg.image_size;
  int g = cfg.glyph_size;
  int superclass = class_id / cfg.subclasses_per_superclass;
  int shape = class_id % cfg.subclasses_per_superclass;

  LabeledImage img;
  img.class_id = class_id;
  img.superclass_id = superclass;
  img.pixels = Tensor({n, n, 3});

  // Glyph position first so the noise toggle does not move glyphs. Large
  // images use a stride-8 grid away from the borders: the glyph then keeps a
  // stable offset inside a downsampled cell and border padding effects do
  // not vary with placement. Small images fall back to all interior starts.
  std::vector<int> starts;
  if (n - g - 1 >= 17) {
    for (int s = 9; s + g <= n - 9; s += 8) starts.push_back(s);
  }
  if (starts.empty()) {
    for (int s = 1; s <= n - g - 1; ++s) starts.push_back(s);
  }
  int r0 = starts[static_cast<std::size_t>(rng.below(static_cast<int>(starts.size())))];
  int q0 = starts[static_cast<std::size_t>(rng.below(static_cast<int>(starts.size())))];
  bool flip = cfg.hflip && rng.uniform() < 0.5;

  for (int r = 0; r < n; ++r) {
    for (int q = 0; q < n; ++q) {
      for (int ch = 0; ch < 3; ++ch) {
        img.pixels.at(r, q, ch) =
            static_cast<Scalar>(texture_value(superclass, ch, r, q, n));
      }
    }
  }
  for (int r = 0; r < g; ++r) {
    for (int q = 0; q < g; ++q) {
      int mask = glyph_mask(shape, r, q, g);
      if (!mask) continue;
      for (int ch = 0; ch < 3; ++ch) {
        if (mask & (1 << ch)) img.pixels.at(r0 + r, q0 + q, ch) = static_cast<Scalar>(0.95);
      }
    }
  }
  if (flip) {
    for (int r = 0; r < n; ++r) {
      for (int q = 0; q < n / 2; ++q) {
        for (int ch = 0; ch < 3; ++ch) {
          std::swap(img.pixels.at(r, q, ch), img.pixels.at(r, n - 1 - q, ch));
        }
      }
    }
  }
  if (cfg.noise_std > 0) {
    for (std::int64_t i = 0; i < img.pixels.numel(); ++i) {
      double v = img.pixels[i] + rng.normal(0.0, cfg.noise_std);
      img.pixels[i] = static_cast<Scalar>(std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

}  // namespace detail_data

inline Dataset generate(const SyntheticTaskConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  Rng rng(derive_seed(cfg.seed, 0x0da7a));
  for (int c = 0; c < cfg.num_classes(); ++c) {
    for (int i = 0; i < cfg.train_per_class; ++i) {
      ds.train.push_back(detail_data::render(cfg, c, rng));
    }
  }
  for (int c = 0; c < cfg.num_classes(); ++c) {
    for (int i = 0; i < cfg.val_per_class; ++i) {
      ds.val.push_back(detail_data::render(cfg, c, rng));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// pair batching

// One training batch: 20 images drawn as 4 categories x 5 images, split
// uniformly at random into 10 disjoint ordered pairs.
struct PairBatch {
  static constexpr int kImages = 20;
  static constexpr int kCategories = 4;
  static constexpr int kPerCategory = 5;

  std::vector<int> items;                    // indices into dataset.train, size 20
  std::vector<std::array<int, 2>> pairs;     // positions into items, size 10
  std::vector<int> pair_same;                // y per pair: 1 same class, 0 different
};

// Uniform random perfect matching: shuffle, then pair consecutive slots.
// Every matching of 2N elements has the same number (2^N * N!) of generating
// permutations, so the induced distribution is uniform.
inline std::vector<std::array<int, 2>> random_pair_partition(int count, Rng& rng) {
  if (count < 2 || count % 2) throw ContractError("pair partition needs a positive even count");
  std::vector<int> order(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);
  std::vector<std::array<int, 2>> pairs;
  pairs.reserve(static_cast<std::size_t>(count / 2));
  for (int i = 0; i < count; i += 2) {
    pairs.push_back({order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(i + 1)]});
  }
  return pairs;
}

// A pair realized as values, with the similarity label derived from the two
// class labels.
struct ContrastivePair {
  Tensor image_a;
  Tensor image_b;
  int class_a = 0;
  int class_b = 0;
  int y_ab = 0;  // 1 same class, 0 different
};

inline std::vector<ContrastivePair> materialize_pairs(const Dataset& ds, const PairBatch& batch) {
  std::vector<ContrastivePair> out;
  out.reserve(batch.pairs.size());
  for (std::size_t i = 0; i < batch.pairs.size(); ++i) {
    const auto& [a, b] = batch.pairs[i];
    const LabeledImage& ia = ds.train[static_cast<std::size_t>(batch.items[static_cast<std::size_t>(a)])];
    const LabeledImage& ib = ds.train[static_cast<std::size_t>(batch.items[static_cast<std::size_t>(b)])];
    ContrastivePair p;
    p.image_a = ia.pixels;
    p.image_b = ib.pixels;
    p.class_a = ia.class_id;
    p.class_b = ib.class_id;
    p.y_ab = batch.pair_same[i];
    if (p.y_ab != (p.class_a == p.class_b ? 1 : 0)) {
      throw DataError("pair label inconsistent with class labels");
    }
    out.push_back(std::move(p));
  }
  return out;
}

inline PairBatch sample_batch(const Dataset& ds, Rng& rng) {
  int k = ds.config.num_classes();
  if (k < PairBatch::kCategories) {
    throw DataError("need at least 4 classes to sample a batch, have " + std::to_string(k));
  }
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(k));
  for (int i = 0; i < static_cast<int>(ds.train.size()); ++i) {
    by_class[static_cast<std::size_t>(ds.train[static_cast<std::size_t>(i)].class_id)].push_back(i);
  }
  for (const auto& members : by_class) {
    if (static_cast<int>(members.size()) < PairBatch::kPerCategory) {
      throw DataError("every class needs at least 5 training images");
    }
  }

  std::vector<int> classes(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) classes[static_cast<std::size_t>(i)] = i;
  rng.shuffle(classes);
  classes.resize(PairBatch::kCategories);

  PairBatch batch;
  for (int c : classes) {
    std::vector<int> members = by_class[static_cast<std::size_t>(c)];
    rng.shuffle(members);
    for (int i = 0; i < PairBatch::kPerCategory; ++i) {
      batch.items.push_back(members[static_cast<std::size_t>(i)]);
    }
  }
  batch.pairs = random_pair_partition(PairBatch::kImages, rng);
  for (const auto& [a, b] : batch.pairs) {
    int ca = ds.train[static_cast<std::size_t>(batch.items[static_cast<std::size_t>(a)])].class_id;
    int cb = ds.train[static_cast<std::size_t>(batch.items[static_cast<std::size_t>(b)])].class_id;
    batch.pair_same.push_back(ca == cb ? 1 : 0);
  }
  return batch;
}

// ---------------------------------------------------------------------------
// on-disk format: JSON manifest plus raw little-endian float64 image arrays

namespace detail_data {

inline void write_f64(const std::filesystem::path& path, const std::vector<LabeledImage>& split) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& img : split) {
    for (std::int64_t i = 0; i < img.pixels.numel(); ++i) {
      double v = static_cast<double>(img.pixels[i]);
      out.write(reinterpret_cast<const char*>(&v), sizeof(double));
    }
  }
}

inline std::vector<LabeledImage> read_f64(const std::filesystem::path& path,
                                          const nlohmann::json& split_meta, int image_size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<int> class_ids = split_meta.at("class_ids").get<std::vector<int>>();
  std::vector<int> super_ids = split_meta.at("superclass_ids").get<std::vector<int>>();
  if (class_ids.size() != super_ids.size()) throw DataError("label arrays disagree in length");
  std::vector<LabeledImage> out;
  out.reserve(class_ids.size());
  std::int64_t per_image = static_cast<std::int64_t>(image_size) * image_size * 3;
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    LabeledImage img;
    img.class_id = class_ids[i];
    img.superclass_id = super_ids[i];
    img.pixels = Tensor({image_size, image_size, 3});
    for (std::int64_t j = 0; j < per_image; ++j) {
      double v;
      in.read(reinterpret_cast<char*>(&v), sizeof(double));
      if (!in) throw DataError("truncated image data in " + path.string());
      img.pixels[j] = static_cast<Scalar>(v);
    }
    out.push_back(std::move(img));
  }
  in.peek();
  if (!in.eof()) throw DataError("trailing bytes in " + path.string());
  return out;
}

inline nlohmann::json split_meta(const std::vector<LabeledImage>& split, const char* file) {
  nlohmann::json meta;
  meta["file"] = file;
  meta["count"] = split.size();
  std::vector<int> class_ids, super_ids;
  for (const auto& img : split) {
    class_ids.push_back(img.class_id);
    super_ids.push_back(img.superclass_id);
  }
  meta["class_ids"] = class_ids;
  meta["superclass_ids"] = super_ids;
  return meta;
}

}  // namespace detail_data

inline nlohmann::json task_config_json(const SyntheticTaskConfig& cfg) {
  return nlohmann::json{
      {"num_superclasses", cfg.num_superclasses},
      {"subclasses_per_superclass", cfg.subclasses_per_superclass},
      {"image_size", cfg.image_size},
      {"glyph_size", cfg.glyph_size},
      {"noise_std", cfg.noise_std},
      {"train_per_class", cfg.train_per_class},
      {"val_per_class", cfg.val_per_class},
      {"hflip", cfg.hflip},
      {"seed", cfg.seed},
  };
}

inline SyntheticTaskConfig task_config_from_json(const nlohmann::json& j);

inline void export_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail_data::write_f64(dir / "train.f64", ds.train);
  detail_data::write_f64(dir / "val.f64", ds.val);
  nlohmann::json manifest;
  manifest["format"] = "cinet-dataset-v1";
  manifest["seed"] = ds.config.seed;
  manifest["num_classes"] = ds.config.num_classes();
  manifest["image_shape"] = {ds.config.image_size, ds.config.image_size, 3};
  manifest["config"] = task_config_json(ds.config);
  manifest["splits"]["train"] = detail_data::split_meta(ds.train, "train.f64");
  manifest["splits"]["val"] = detail_data::split_meta(ds.val, "val.f64");
  std::ofstream out(dir / "manifest.json");
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

inline Dataset import_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "cinet-dataset-v1") {
    throw DataError("unsupported dataset format in " + dir.string());
  }
  Dataset ds;
  ds.config = task_config_from_json(manifest.at("config"));
  ds.train = detail_data::read_f64(dir / manifest["splits"]["train"]["file"].get<std::string>(),
                                   manifest["splits"]["train"], ds.config.image_size);
  ds.val = detail_data::read_f64(dir / manifest["splits"]["val"]["file"].get<std::string>(),
                                 manifest["splits"]["val"], ds.config.image_size);
  return ds;
}

inline SyntheticTaskConfig task_config_from_json(const nlohmann::json& j) {
  SyntheticTaskConfig cfg;
  cfg.num_superclasses = j.at("num_superclasses").get<int>();
  cfg.subclasses_per_superclass = j.at("subclasses_per_superclass").get<int>();
  cfg.image_size = j.at("image_size").get<int>();
  cfg.glyph_size = j.at("glyph_size").get<int>();
  cfg.noise_std = j.at("noise_std").get<double>();
  cfg.train_per_class = j.at("train_per_class").get<int>();
  cfg.val_per_class = j.at("val_per_class").get<int>();
  cfg.hflip = j.at("hflip").get<bool>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

}  // namespace cinet
