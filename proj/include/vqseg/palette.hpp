#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vqseg/errors.hpp"

namespace vqseg {

/// Per-class display names and RGB colors, used both to render synthetic
/// scenes and to colorize predictions.
struct Palette {
  std::vector<std::string> names;
  std::vector<std::array<uint8_t, 3>> colors;

  int size() const { return int(names.size()); }
};

/// Built-in road-scene palette. The first eight classes have fixed semantic
/// colors; further classes get distinct hues from a golden-angle sweep.
inline Palette default_palette(int num_classes) {
  static const std::vector<std::pair<std::string, std::array<uint8_t, 3>>>
      base = {
          {"road", {90, 90, 98}},      {"sky", {70, 130, 180}},
          {"terrain", {110, 140, 70}}, {"building", {158, 104, 92}},
          {"vehicle", {200, 40, 40}},  {"tree", {40, 120, 50}},
          {"pole", {240, 240, 80}},    {"marking", {250, 250, 250}},
      };
  Palette p;
  for (int c = 0; c < num_classes; ++c) {
    if (c < int(base.size())) {
      p.names.push_back(base[size_t(c)].first);
      p.colors.push_back(base[size_t(c)].second);
    } else {
      p.names.push_back("class" + std::to_string(c));
      const double hue = std::fmod(0.61803398875 * (c - 7), 1.0) * 6.0;
      const int i = int(hue);
      const double f = hue - i;
      const uint8_t v = 220, lo = 60;
      const uint8_t q = uint8_t(lo + (v - lo) * (1 - f));
      const uint8_t t = uint8_t(lo + (v - lo) * f);
      switch (i % 6) {
        case 0: p.colors.push_back({v, t, lo}); break;
        case 1: p.colors.push_back({q, v, lo}); break;
        case 2: p.colors.push_back({lo, v, t}); break;
        case 3: p.colors.push_back({lo, q, v}); break;
        case 4: p.colors.push_back({t, lo, v}); break;
        default: p.colors.push_back({v, lo, q}); break;
      }
    }
  }
  return p;
}

/// Loads a palette from CSV lines "index,name,r,g,b" (# starts a comment).
/// Indices must form 0..C-1 without gaps.
inline Palette load_palette(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open palette file " + path);
  std::vector<std::pair<std::string, std::array<uint8_t, 3>>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto h = line.find('#');
    if (h != std::string::npos) line.resize(h);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 5)
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": expected index,name,r,g,b");
    const int idx = std::stoi(fields[0]);
    if (idx != int(rows.size()))
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": class indices must be consecutive from 0");
    auto channel = [&](const std::string& s) {
      const int v = std::stoi(s);
      if (v < 0 || v > 255)
        throw DataError(path + ":" + std::to_string(lineno) +
                        ": color channel out of range");
      return uint8_t(v);
    };
    // Trim surrounding whitespace from the name.
    std::string name = fields[1];
    const auto b = name.find_first_not_of(" \t");
    const auto e = name.find_last_not_of(" \t");
    name = b == std::string::npos ? "" : name.substr(b, e - b + 1);
    rows.emplace_back(name, std::array<uint8_t, 3>{channel(fields[2]),
                                                   channel(fields[3]),
                                                   channel(fields[4])});
  }
  if (rows.empty()) throw DataError(path + ": empty palette");
  Palette p;
  for (auto& [n, c] : rows) {
    p.names.push_back(n);
    p.colors.push_back(c);
  }
  return p;
}

}  // namespace vqseg
