#include "rmsa/spectrum.hpp"

#include <algorithm>

namespace rmsa {

namespace {

std::uint64_t range_bits(int lo, int hi) {
  // Bits [lo, hi) within one 64-bit word, 0 <= lo < hi <= 64.
  const std::uint64_t upper = hi == 64 ? ~0ULL : ((1ULL << hi) - 1ULL);
  return upper & ~((1ULL << lo) - 1ULL);
}

template <typename Op>
void for_each_word_range(int lo, int width, Op op) {
  int pos = lo;
  const int end = lo + width;
  while (pos < end) {
    const int w = pos >> 6;
    const int bit_lo = pos & 63;
    const int bit_hi = std::min(64, bit_lo + (end - pos));
    op(static_cast<std::size_t>(w), range_bits(bit_lo, bit_hi));
    pos += bit_hi - bit_lo;
  }
}

}  // namespace

void SlotMask::set_range(int lo, int width) {
  for_each_word_range(lo, width, [this](std::size_t w, std::uint64_t bits) { words[w] |= bits; });
}

void SlotMask::clear_range(int lo, int width) {
  for_each_word_range(lo, width, [this](std::size_t w, std::uint64_t bits) { words[w] &= ~bits; });
}

int SlotMask::count() const {
  int c = 0;
  for (auto w : words) c += std::popcount(w);
  return c;
}

std::optional<int> first_fit_in(const SlotMask& busy, int num_fsu, int width, int lo, int hi) {
  if (width < 1) return std::nullopt;
  hi = std::min(hi, num_fsu - width);
  if (lo > hi || lo < 0) return std::nullopt;
  const int nwords = (num_fsu + 63) / 64;
  // fits bit s <=> cells [s, s + width) all free and inside the grid.
  std::array<std::uint64_t, SlotMask::kWords> free{};
  for (int w = 0; w < nwords; ++w) {
    free[static_cast<std::size_t>(w)] = ~busy.words[static_cast<std::size_t>(w)];
  }
  if (num_fsu % 64 != 0) free[static_cast<std::size_t>(nwords - 1)] &= (1ULL << (num_fsu % 64)) - 1ULL;
  std::array<std::uint64_t, SlotMask::kWords> fits = free;
  // Doubling: after the loop, fits covers a run of `covered` free cells.
  int covered = 1;
  while (covered < width) {
    const int shift = std::min(covered, width - covered);
    const int ws = shift >> 6;
    const int bs = shift & 63;
    for (int w = 0; w < nwords; ++w) {
      std::uint64_t shifted = 0;
      const int src = w + ws;
      if (src < nwords) {
        shifted = fits[static_cast<std::size_t>(src)] >> bs;
        if (bs != 0 && src + 1 < nwords) shifted |= fits[static_cast<std::size_t>(src + 1)] << (64 - bs);
      }
      fits[static_cast<std::size_t>(w)] &= shifted;
    }
    covered += shift;
  }
  for (int w = lo >> 6; w <= (hi >> 6); ++w) {
    std::uint64_t bits = fits[static_cast<std::size_t>(w)];
    const int base = w << 6;
    if (base < lo) bits &= ~((1ULL << (lo - base)) - 1ULL);
    if (hi - base < 63) bits &= (1ULL << (hi - base + 1)) - 1ULL;
    if (bits) return base + std::countr_zero(bits);
  }
  return std::nullopt;
}

SpectrumGrid::SpectrumGrid(int num_edges, int num_fsu)
    : num_edges_(num_edges), num_fsu_(num_fsu), busy_(static_cast<std::size_t>(num_edges)),
      owner_(static_cast<std::size_t>(num_edges) * static_cast<std::size_t>(num_fsu), -1),
      expiry_(static_cast<std::size_t>(num_edges) * static_cast<std::size_t>(num_fsu), 0.0) {
  if (num_fsu < 1 || num_fsu > kMaxFsu) throw ConfigError("num_fsu must lie in [1, 512]");
}

SlotMask SpectrumGrid::path_busy(std::span<const int> edges) const {
  SlotMask m;
  for (int e : edges) m |= busy_[static_cast<std::size_t>(e)];
  return m;
}

bool SpectrumGrid::block_free(std::span<const int> edges, int start, int width) const {
  if (start < 0 || start + width > num_fsu_) return false;
  for (int e : edges) {
    for (int f = start; f < start + width; ++f) {
      if (busy_[static_cast<std::size_t>(e)].test(f)) return false;
    }
  }
  return true;
}

void SpectrumGrid::allocate(std::span<const int> edges, int start, int width, std::int64_t conn_id, double expiry) {
  for (int e : edges) {
    busy_[static_cast<std::size_t>(e)].set_range(start, width);
    for (int f = start; f < start + width; ++f) {
      owner_[cell(e, f)] = conn_id;
      expiry_[cell(e, f)] = expiry;
    }
  }
}

void SpectrumGrid::release(std::span<const int> edges, int start, int width) {
  for (int e : edges) {
    busy_[static_cast<std::size_t>(e)].clear_range(start, width);
    for (int f = start; f < start + width; ++f) {
      owner_[cell(e, f)] = -1;
      expiry_[cell(e, f)] = 0.0;
    }
  }
}

void SpectrumGrid::clear() {
  std::fill(busy_.begin(), busy_.end(), SlotMask{});
  std::fill(owner_.begin(), owner_.end(), -1);
  std::fill(expiry_.begin(), expiry_.end(), 0.0);
}

int SpectrumGrid::busy_cells() const {
  int c = 0;
  for (const auto& m : busy_) c += m.count();
  return c;
}

std::uint64_t SpectrumGrid::hash() const {
  std::uint64_t h = fnv1a_value(num_edges_, 0xcbf29ce484222325ULL);
  h = fnv1a_value(num_fsu_, h);
  for (const auto& m : busy_) {
    for (auto w : m.words) h = fnv1a_value(w, h);
  }
  for (auto o : owner_) h = fnv1a_value(o, h);
  for (auto x : expiry_) h = fnv1a_value(x, h);
  return h;
}

}  // namespace rmsa
