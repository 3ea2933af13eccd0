#pragma once

#include "rmsa/common.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace rmsa {

inline constexpr int kMaxFsu = 512;

/// Occupancy bitmap for one link: bit i set means FSU i is busy.
struct SlotMask {
  static constexpr int kWords = kMaxFsu / 64;
  std::array<std::uint64_t, kWords> words{};

  bool test(int i) const { return (words[static_cast<std::size_t>(i >> 6)] >> (i & 63)) & 1U; }
  void set_range(int lo, int width);
  void clear_range(int lo, int width);
  int count() const;

  SlotMask& operator|=(const SlotMask& o) {
    for (int w = 0; w < kWords; ++w) words[static_cast<std::size_t>(w)] |= o.words[static_cast<std::size_t>(w)];
    return *this;
  }
  bool operator==(const SlotMask&) const = default;
};

/// Smallest start s in [lo, hi] with FSUs [s, s + width) all free in `busy`
/// and s + width <= num_fsu.
std::optional<int> first_fit_in(const SlotMask& busy, int num_fsu, int width, int lo, int hi);

/// Per-edge FSU state: a busy bitmap plus the owning connection and its
/// expiry time for every cell. Both directed links of an edge share it.
class SpectrumGrid {
 public:
  SpectrumGrid() = default;
  SpectrumGrid(int num_edges, int num_fsu);

  int num_edges() const { return num_edges_; }
  int num_fsu() const { return num_fsu_; }

  const SlotMask& busy(int edge) const { return busy_[static_cast<std::size_t>(edge)]; }
  std::int64_t owner(int edge, int fsu) const { return owner_[cell(edge, fsu)]; }
  double expiry(int edge, int fsu) const { return expiry_[cell(edge, fsu)]; }

  /// Union of busy bitmaps over a set of edges.
  SlotMask path_busy(std::span<const int> edges) const;
  bool block_free(std::span<const int> edges, int start, int width) const;

  void allocate(std::span<const int> edges, int start, int width, std::int64_t conn_id, double expiry);
  void release(std::span<const int> edges, int start, int width);
  void clear();

  /// Number of busy cells across all edges.
  int busy_cells() const;
  /// Content hash over bitmaps, owners and expiry times.
  std::uint64_t hash() const;

  bool operator==(const SpectrumGrid&) const = default;

 private:
  std::size_t cell(int edge, int fsu) const {
    return static_cast<std::size_t>(edge) * static_cast<std::size_t>(num_fsu_) + static_cast<std::size_t>(fsu);
  }
  int num_edges_ = 0;
  int num_fsu_ = 0;
  std::vector<SlotMask> busy_;
  std::vector<std::int64_t> owner_;
  std::vector<double> expiry_;
};

}  // namespace rmsa
