// SPDX-License-Identifier: Apache-2.0
#include "amoe/grid.hpp"

#include <string>

#include "amoe/errors.hpp"

namespace amoe {

DelayedTokenGrid apply_delay(const std::vector<std::vector<int>>& undelayed) {
  if (undelayed.empty()) throw GridError("apply_delay: empty grid");
  const long t = static_cast<long>(undelayed[0].size());
  const int s_total = static_cast<int>(undelayed.size()) - 1;
  for (size_t r = 0; r < undelayed.size(); ++r) {
    if (static_cast<long>(undelayed[r].size()) != t) {
      throw GridError("apply_delay: ragged input, row " + std::to_string(r) + " has " +
                      std::to_string(undelayed[r].size()) + " tokens, expected " +
                      std::to_string(t));
    }
    for (int tok : undelayed[r]) {
      if (tok == kPadToken) {
        throw GridError("apply_delay: PAD in undelayed row " + std::to_string(r));
      }
    }
  }
  DelayedTokenGrid grid;
  grid.rows.resize(undelayed.size());
  for (size_t r = 0; r < undelayed.size(); ++r) {
    const long shift = static_cast<long>(r);
    auto& row = grid.rows[r];
    row.assign(t + s_total, kPadToken);
    for (long i = 0; i < t; ++i) row[i + shift] = undelayed[r][i];
  }
  return grid;
}

std::vector<std::vector<int>> undo_delay(const DelayedTokenGrid& grid) {
  if (grid.rows.empty()) throw GridError("undo_delay: empty grid");
  const int s_total = grid.num_audio_streams();
  const long w = grid.width();
  const long t = w - s_total;
  if (t <= 0) throw GridError("undo_delay: grid width " + std::to_string(w) +
                              " too small for " + std::to_string(s_total) + " audio streams");
  std::vector<std::vector<int>> out(grid.rows.size());
  for (size_t r = 0; r < grid.rows.size(); ++r) {
    const auto& row = grid.rows[r];
    if (static_cast<long>(row.size()) != w) {
      throw GridError("undo_delay: ragged grid, row " + std::to_string(r));
    }
    const long shift = static_cast<long>(r);
    for (long i = 0; i < shift; ++i) {
      if (row[i] != kPadToken) {
        throw GridError("undo_delay: row " + std::to_string(r) + " expects " +
                        std::to_string(shift) + " leading PADs");
      }
    }
    for (long i = shift + t; i < w; ++i) {
      if (row[i] != kPadToken) {
        throw GridError("undo_delay: row " + std::to_string(r) + " expects " +
                        std::to_string(s_total - shift) + " trailing PADs");
      }
    }
    out[r].resize(t);
    for (long i = 0; i < t; ++i) {
      const int tok = row[shift + i];
      if (tok == kPadToken) {
        throw GridError("undo_delay: row " + std::to_string(r) + " has PAD inside its span");
      }
      out[r][i] = tok;
    }
  }
  return out;
}

}  // namespace amoe
