// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "moelab/common.hpp"

namespace moelab {

// One training example: input tokens, expected continuation, domain label.
struct Sample {
  std::vector<int> input;
  std::vector<int> target;
  int domain = 0;
};

// A batch of sequences with one domain label per sequence; mixed batches
// additionally rely on the derived per-token labels.
struct DomainBatch {
  std::vector<Sample> seqs;
  bool mixed = false;
};

// Row-packed view consumed by the model: streams are input + SEP + target,
// concatenated across sequences. targets[p] is the next-token id predicted
// at position p, or -1 where the position carries no loss.
struct PackedBatch {
  std::vector<int> tokens;
  std::vector<int> seq_begin;    // size B+1
  std::vector<int> targets;      // per position
  std::vector<int> token_domain; // per position
  std::vector<int> seq_domain;   // per sequence

  int num_rows() const { return static_cast<int>(tokens.size()); }
};

inline PackedBatch pack(const DomainBatch& batch, int sep_token) {
  PackedBatch out;
  out.seq_begin.push_back(0);
  for (const Sample& s : batch.seqs) {
    const int base = static_cast<int>(out.tokens.size());
    for (int t : s.input) out.tokens.push_back(t);
    out.tokens.push_back(sep_token);
    for (int t : s.target) out.tokens.push_back(t);
    const int len = static_cast<int>(out.tokens.size()) - base;
    const int sep_pos = base + static_cast<int>(s.input.size());
    for (int p = 0; p < len; ++p) {
      const int abs = base + p;
      // positions sep..sep+m-1 predict the target tokens
      const bool active = abs >= sep_pos && abs + 1 < base + len;
      out.targets.push_back(active ? out.tokens[static_cast<size_t>(abs) + 1] : -1);
      out.token_domain.push_back(s.domain);
    }
    out.seq_begin.push_back(static_cast<int>(out.tokens.size()));
    out.seq_domain.push_back(s.domain);
  }
  return out;
}

}  // namespace moelab
