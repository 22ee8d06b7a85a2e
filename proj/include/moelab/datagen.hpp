// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic task generator. Every sample is a pure function of
// (spec seed, sample index); training draws from a disjoint index range
// above the evaluation indices.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moelab/batch.hpp"
#include "moelab/model.hpp"

namespace moelab {

enum class TaskKind { Copy, Reverse, ModularAdd, Sort, Parity, PatternFill, Lm };

TaskKind parse_task_kind(const std::string& s);
std::string to_string(TaskKind k);

struct DomainSpec {
  int id = 0;
  TaskKind kind = TaskKind::Copy;
  uint64_t seed = 0;
  int min_len = 3;
  int max_len = 8;
  int value_lo = 0;
  int value_hi = 15;

  void validate() const;
};

// evaluation uses indices [0, n); training streams start here
inline constexpr long long kTrainIndexBase = 1 << 20;

Sample make_sample(const DomainSpec& spec, long long index);

enum class BatchMode { Grouped, Mixed };

// Grouped mode draws every sequence from specs[domain_index]; mixed mode
// round-robins all specs. Identical (step, batch_size) always regenerate the
// same bytes.
DomainBatch sample_batch(const std::vector<DomainSpec>& specs, long long step, int batch_size,
                         BatchMode mode, int domain_index = 0);

struct EvalSuite {
  std::vector<std::vector<Sample>> per_domain;
  std::vector<Sample> general;  // drawn from the pretraining mixture's LM task
};

EvalSuite build_eval_suite(const std::vector<DomainSpec>& specs, const DomainSpec& general_spec,
                           int samples_per_domain);

// Greedy argmax decoding; a sample counts only when the full target matches.
template <class S>
double exact_match_eval(const MoEModel<S>& model, const std::vector<Sample>& samples,
                        bool use_adaptive) {
  if (samples.empty()) return 0.0;
  const int sep = model.config().sep_token();
  std::vector<std::vector<int>> produced(samples.size());
  int max_target = 0;
  for (const auto& s : samples) max_target = std::max<int>(max_target, int(s.target.size()));

  for (int round = 0; round < max_target; ++round) {
    PackedBatch packed;
    packed.seq_begin.push_back(0);
    std::vector<size_t> live;
    for (size_t i = 0; i < samples.size(); ++i) {
      if (produced[i].size() >= samples[i].target.size()) continue;
      live.push_back(i);
      for (int t : samples[i].input) packed.tokens.push_back(t);
      packed.tokens.push_back(sep);
      for (int t : produced[i]) packed.tokens.push_back(t);
      packed.seq_begin.push_back(static_cast<int>(packed.tokens.size()));
      packed.seq_domain.push_back(samples[i].domain);
    }
    if (live.empty()) break;
    packed.targets.assign(packed.tokens.size(), -1);
    packed.token_domain.assign(packed.tokens.size(), 0);

    Tape<S> tape;
    tape.grad_enabled = false;
    ForwardOptions opts;
    opts.use_adaptive = use_adaptive;
    auto result = model.forward(tape, packed, opts);
    for (size_t j = 0; j < live.size(); ++j) {
      const int last = packed.seq_begin[j + 1] - 1;
      const int V = model.config().vocab_size;
      int best = 0;
      for (int v = 1; v < V; ++v)
        if (result.logits.at(last, v) > result.logits.at(last, best)) best = v;
      produced[live[j]].push_back(best);
    }
  }
  int correct = 0;
  for (size_t i = 0; i < samples.size(); ++i)
    if (produced[i] == samples[i].target) ++correct;
  return double(correct) / double(samples.size());
}

}  // namespace moelab
