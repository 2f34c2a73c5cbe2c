// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

namespace amoe {

// Reserved sentinel ids, outside every vocabulary. Embedding tables carry one
// row for each: PAD fills empty grid cells, BOS anchors the not-yet-started
// cells of delayed streams during decoding.
constexpr int kPadToken = -1;
constexpr int kBosToken = -2;

// (1+S) token streams on the k-step delay pattern: row 0 is text, row s is
// audio codebook s shifted right by s columns. A fully populated grid of
// logical length T is (1+S) x (T+S) with k leading and S-k trailing PADs in
// row k. Partially decoded grids carry extra trailing PADs.
struct DelayedTokenGrid {
  std::vector<std::vector<int>> rows;

  int num_audio_streams() const { return static_cast<int>(rows.size()) - 1; }
  long width() const { return rows.empty() ? 0 : static_cast<long>(rows[0].size()); }
  // T for a fully populated grid.
  long logical_len() const { return width() - num_audio_streams(); }
};

// Right-shifts row k by k and pads to width T+S. Input must be rectangular,
// (1+S) rows of T real tokens, no PADs.
DelayedTokenGrid apply_delay(const std::vector<std::vector<int>>& undelayed);

// Exact inverse of apply_delay. Raises GridError naming the offending row when
// the PAD structure is malformed.
std::vector<std::vector<int>> undo_delay(const DelayedTokenGrid& grid);

}  // namespace amoe
