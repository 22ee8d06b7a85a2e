// SPDX-License-Identifier: Apache-2.0
#include "moelab/datagen.hpp"

#include <algorithm>
#include <numeric>

#include "moelab/random.hpp"

namespace moelab {

namespace {
constexpr uint64_t kSampleSalt = 0x5a6d70ULL;
constexpr uint64_t kPermSalt = 0x7065726dULL;
constexpr int kFillTargetLen = 4;
constexpr int kLmTargetLen = 4;
}  // namespace

TaskKind parse_task_kind(const std::string& s) {
  if (s == "copy") return TaskKind::Copy;
  if (s == "reverse") return TaskKind::Reverse;
  if (s == "modular-add") return TaskKind::ModularAdd;
  if (s == "sort") return TaskKind::Sort;
  if (s == "parity") return TaskKind::Parity;
  if (s == "pattern-fill") return TaskKind::PatternFill;
  if (s == "lm") return TaskKind::Lm;
  throw ConfigError("unknown task kind '" + s + "'");
}

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::ModularAdd: return "modular-add";
    case TaskKind::Sort: return "sort";
    case TaskKind::Parity: return "parity";
    case TaskKind::PatternFill: return "pattern-fill";
    default: return "lm";
  }
}

void DomainSpec::validate() const {
  if (min_len < 1 || max_len < min_len) throw ConfigError("domain: bad sequence length range");
  if (value_lo < 0 || value_hi < value_lo) throw ConfigError("domain: bad value range");
}

namespace {

// fixed successor permutation over the value range, derived from the spec
// seed alone
std::vector<int> successor_table(const DomainSpec& spec) {
  const int n = spec.value_hi - spec.value_lo + 1;
  std::vector<int> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(mix64(spec.seed, kPermSalt));
  for (int i = n - 1; i > 0; --i) {
    const int j = rng.uniform_int(0, i);
    std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
  }
  return perm;
}

}  // namespace

Sample make_sample(const DomainSpec& spec, long long index) {
  spec.validate();
  Rng rng(mix64(spec.seed, mix64(kSampleSalt, static_cast<uint64_t>(index))));
  Sample s;
  s.domain = spec.id;
  const int n = rng.uniform_int(spec.min_len, spec.max_len);
  const int lo = spec.value_lo, hi = spec.value_hi;
  const int width = hi - lo + 1;

  switch (spec.kind) {
    case TaskKind::Copy: {
      for (int i = 0; i < n; ++i) s.input.push_back(rng.uniform_int(lo, hi));
      s.target = s.input;
      break;
    }
    case TaskKind::Reverse: {
      for (int i = 0; i < n; ++i) s.input.push_back(rng.uniform_int(lo, hi));
      s.target.assign(s.input.rbegin(), s.input.rend());
      break;
    }
    case TaskKind::ModularAdd: {
      long long sum = 0;
      for (int i = 0; i < n; ++i) {
        const int v = rng.uniform_int(lo, hi);
        s.input.push_back(v);
        sum += v - lo;
      }
      s.target.push_back(lo + static_cast<int>(sum % width));
      break;
    }
    case TaskKind::Sort: {
      for (int i = 0; i < n; ++i) s.input.push_back(rng.uniform_int(lo, hi));
      s.target = s.input;
      std::sort(s.target.begin(), s.target.end());
      break;
    }
    case TaskKind::Parity: {
      int ones = 0;
      for (int i = 0; i < n; ++i) {
        const int bit = rng.uniform_int(0, 1);
        ones += bit;
        s.input.push_back(lo + bit);
      }
      s.target.push_back(lo + (ones % 2));
      break;
    }
    case TaskKind::PatternFill: {
      const int period = rng.uniform_int(2, 3);
      std::vector<int> base;
      for (int i = 0; i < period; ++i) base.push_back(rng.uniform_int(lo, hi));
      for (int i = 0; i < n; ++i) s.input.push_back(base[static_cast<size_t>(i % period)]);
      for (int i = 0; i < kFillTargetLen; ++i)
        s.target.push_back(base[static_cast<size_t>((n + i) % period)]);
      break;
    }
    case TaskKind::Lm: {
      const auto perm = successor_table(spec);
      int v = rng.uniform_int(0, width - 1);
      for (int i = 0; i < n; ++i) {
        s.input.push_back(lo + v);
        v = perm[static_cast<size_t>(v)];
      }
      for (int i = 0; i < kLmTargetLen; ++i) {
        s.target.push_back(lo + v);
        v = perm[static_cast<size_t>(v)];
      }
      break;
    }
  }
  return s;
}

DomainBatch sample_batch(const std::vector<DomainSpec>& specs, long long step, int batch_size,
                         BatchMode mode, int domain_index) {
  if (specs.empty()) throw ArgumentError("sample_batch: no domain specs");
  DomainBatch out;
  out.mixed = mode == BatchMode::Mixed;
  for (int i = 0; i < batch_size; ++i) {
    const DomainSpec& spec = mode == BatchMode::Grouped
                                 ? specs[static_cast<size_t>(domain_index)]
                                 : specs[static_cast<size_t>(i) % specs.size()];
    const long long index = kTrainIndexBase + step * batch_size + i;
    out.seqs.push_back(make_sample(spec, index));
  }
  return out;
}

EvalSuite build_eval_suite(const std::vector<DomainSpec>& specs, const DomainSpec& general_spec,
                           int samples_per_domain) {
  EvalSuite suite;
  for (const auto& spec : specs) {
    std::vector<Sample> samples;
    for (int i = 0; i < samples_per_domain; ++i) samples.push_back(make_sample(spec, i));
    suite.per_domain.push_back(std::move(samples));
  }
  for (int i = 0; i < samples_per_domain; ++i)
    suite.general.push_back(make_sample(general_spec, i));
  return suite;
}

}  // namespace moelab
