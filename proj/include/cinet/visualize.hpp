#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cinet/error.hpp"
#include "cinet/model.hpp"
#include "cinet/sci.hpp"
#include "cinet/tensor.hpp"

namespace cinet {

// One spatial activation map destined for a grayscale image.
struct ActivationMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // row-major
};

inline ActivationMap channel_slice(const Tensor& spatial, int channel) {
  ActivationMap m;
  m.height = spatial.extent(0);
  m.width = spatial.extent(1);
  m.values.reserve(static_cast<std::size_t>(m.height) * m.width);
  for (int r = 0; r < m.height; ++r) {
    for (int q = 0; q < m.width; ++q) m.values.push_back(spatial.at(r, q, channel));
  }
  return m;
}

inline ActivationMap channel_mean(const Tensor& spatial) {
  ActivationMap m;
  m.height = spatial.extent(0);
  m.width = spatial.extent(1);
  int c = spatial.extent(2);
  for (int r = 0; r < m.height; ++r) {
    for (int q = 0; q < m.width; ++q) {
      double acc = 0.0;
      for (int ch = 0; ch < c; ++ch) acc += spatial.at(r, q, ch);
      m.values.push_back(acc / c);
    }
  }
  return m;
}

// Min-max normalization to 8-bit gray; a constant map renders as mid-gray.
inline std::vector<std::uint8_t> to_gray(const ActivationMap& m) {
  double lo = m.values.empty() ? 0.0 : m.values[0];
  double hi = lo;
  for (double v : m.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<std::uint8_t> out;
  out.reserve(m.values.size());
  if (hi == lo) {
    out.assign(m.values.size(), 128);
    return out;
  }
  for (double v : m.values) {
    double t = (v - lo) / (hi - lo);
    out.push_back(static_cast<std::uint8_t>(std::lround(t * 255.0)));
  }
  return out;
}

inline void write_pgm(const std::filesystem::path& path, const ActivationMap& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P5\n" << m.width << " " << m.height << "\n255\n";
  auto gray = to_gray(m);
  out.write(reinterpret_cast<const char*>(gray.data()),
            static_cast<std::streamsize>(gray.size()));
}

inline nlohmann::json map_json(const ActivationMap& m) {
  return nlohmann::json{{"height", m.height}, {"width", m.width}, {"values", m.values}};
}

}  // namespace cinet
