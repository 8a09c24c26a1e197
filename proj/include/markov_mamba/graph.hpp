#pragma once

// Batched training graph: the model unrolled over T positions on a Tape, rows
// indexing the B sequences of a batch. Records the mean next-token
// cross-entropy over positions t = start..T-1 (1-based) as output "loss".
//
// Every selectivity term depends on the token window only, so x~, b, c and a_t
// are tabulated once per evaluation over all windows (alphabet plus a padding
// symbol, (A+1)^w rows) and gathered per position by a host-computed window
// index. Only the recurrence and the gate run per position; the output
// projection, MLP and head act on all positions stacked as one block.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "markov_mamba/errors.hpp"
#include "markov_mamba/markov.hpp"
#include "markov_mamba/model.hpp"
#include "markov_mamba/tape.hpp"

namespace markov_mamba {

class TrainingGraph {
 public:
  TrainingGraph(MambaConfig cfg, std::size_t batch, std::size_t length, std::size_t loss_start)
      : cfg_(std::move(cfg)), batch_(batch), length_(length), start_(loss_start) {
    cfg_.validate();
    if (batch < 1) throw ParameterError("batch size must be >= 1");
    if (loss_start < 1 || loss_start >= length) throw ParameterError("loss positions [start, T-1] are empty");
    build();
  }

  const MambaConfig& config() const noexcept { return cfg_; }
  std::size_t batch() const noexcept { return batch_; }
  std::size_t length() const noexcept { return length_; }
  ad::Tape& tape() noexcept { return tape_; }

  void bind_params(const MambaParams& p) {
    check_params(p, cfg_);
    p.for_each([&](const std::string& name, const Tensor& t) { tape_.bind(param_ids_.at(name), t); });
  }

  void bind_tokens(std::span<const TokenSequence> seqs) {
    if (seqs.size() != batch_) throw ContractError("batch holds " + std::to_string(seqs.size()) + " sequences, graph expects " + std::to_string(batch_));
    for (const TokenSequence& s : seqs) {
      if (s.size() != length_) throw ContractError("sequence length " + std::to_string(s.size()) + ", graph expects " + std::to_string(length_));
      for (Token x : s.tokens) {
        if (x >= cfg_.alphabet) throw ContractError("token outside the model alphabet");
      }
    }
    const std::size_t pad = cfg_.alphabet;
    Tensor& all = tape_.input_buffer(all_tok_);
    Tensor& next = tape_.input_buffer(targets_);
    for (std::size_t t = 0; t < length_; ++t) {
      Tensor& tok = tape_.input_buffer(tok_ids_[t]);
      for (std::size_t b = 0; b < batch_; ++b) {
        tok[b] = seqs[b].tokens[t];
        all[t * batch_ + b] = seqs[b].tokens[t];
        next[t * batch_ + b] = t + 1 < length_ ? seqs[b].tokens[t + 1] : 0.0;
      }
      for (std::size_t k = 0; k < 3; ++k) {
        Tensor& idx = tape_.input_buffer(win_ids_[k][t]);
        const std::size_t w = eff_window(k);
        for (std::size_t b = 0; b < batch_; ++b) {
          std::size_t code = 0, mult = 1;
          for (std::size_t j = 0; j < w; ++j) {
            const std::size_t back = w - 1 - j;
            const std::size_t sym = back > t ? pad : seqs[b].tokens[t - back];
            code += sym * mult;
            mult *= pad + 1;
          }
          idx[b] = static_cast<double>(code);
        }
      }
    }
  }

  /// Forward pass; returns the loss.
  double forward() {
    tape_.forward();
    return tape_.value(loss_)[0];
  }

  /// Gradients of the loss, in parameter layout. Requires forward().
  MambaParams backward() {
    tape_.backward(loss_);
    MambaParams g;
    for (const auto& [name, id] : param_ids_) g.slot(name) = tape_.grad(id);
    return g;
  }

  /// Predicted distributions after position t (1-based): B x alphabet.
  Tensor probs(std::size_t t) const {
    if (t < 1 || t > length_) throw ContractError("position out of range");
    const Tensor& all = tape_.value(probs_);
    const std::size_t A = all.cols();
    Tensor out(batch_, A);
    std::copy_n(&all((t - 1) * batch_, 0), batch_ * A, out.storage().data());
    return out;
  }
  /// a_t at position t: B x 1.
  const Tensor& a_t(std::size_t t) const { return tape_.value(a_.at(t - 1)); }

 private:
  // 0: X, 1: B, 2: C
  std::size_t eff_window(std::size_t k) const {
    if (!cfg_.use_conv) return 1;
    return k == 0 ? cfg_.window_x : (k == 1 ? cfg_.window_b : cfg_.window_c);
  }

  // relu?(conv(W e)) tabulated over all windows: (A+1)^w x dim.
  ad::NodeId window_table(ad::NodeId proj, ad::NodeId kernel, std::size_t w, const std::string& tag) {
    const std::size_t A = cfg_.alphabet, S = A + 1;
    std::size_t rows = 1;
    for (std::size_t j = 0; j < w; ++j) rows *= S;
    std::vector<ad::NodeId> terms;
    for (std::size_t j = 0; j < w; ++j) {
      Tensor idx(rows, 1), mask(rows, 1);
      std::size_t div = 1;
      for (std::size_t q = 0; q < j; ++q) div *= S;
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t sym = (r / div) % S;
        idx[r] = static_cast<double>(sym == A ? 0 : sym);
        mask[r] = sym == A ? 0.0 : 1.0;
      }
      ad::NodeId g = tape_.gather_rows(proj, tape_.constant(std::move(idx), tag + "_idx" + std::to_string(j)));
      g = tape_.mul(g, tape_.constant(std::move(mask), tag + "_mask" + std::to_string(j)));
      if (cfg_.use_conv) g = tape_.mul(g, tape_.transpose(tape_.slice_cols(kernel, j, j + 1)));
      terms.push_back(g);
    }
    ad::NodeId out = terms.size() == 1 ? terms.front() : tape_.add_n(terms);
    if (cfg_.relu_in_selectivity()) out = tape_.relu(out);
    return out;
  }

  // Current-token column of the window table.
  Tensor current_index(std::size_t w) const {
    const std::size_t S = cfg_.alphabet + 1;
    std::size_t rows = 1, div = 1;
    for (std::size_t j = 0; j < w; ++j) rows *= S;
    for (std::size_t j = 0; j + 1 < w; ++j) div *= S;
    Tensor idx(rows, 1);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t sym = (r / div) % S;
      idx[r] = static_cast<double>(sym == cfg_.alphabet ? 0 : sym);
    }
    return idx;
  }

  void build() {
    for (const auto& [name, shape] : expected_shapes(cfg_)) param_ids_[name] = tape_.input(name, shape);
    auto P = [&](const char* n) { return param_ids_.at(n); };

    const ad::NodeId E = P("embedding");
    const ad::NodeId delta_tok = tape_.softplus(tape_.add(tape_.matmul(E, P("w_delta")), P("delta")));  // A x 1
    const ad::NodeId a_tok = tape_.exp(tape_.neg(tape_.mul(delta_tok, P("a"))));                        // A x 1

    const std::size_t wx = eff_window(0), wb = eff_window(1), wc = eff_window(2);
    ad::NodeId tx = window_table(tape_.matmul_bt(E, P("W_X")), P("conv_X"), wx, "X");
    tx = tape_.mul(tx, tape_.gather_rows(delta_tok, tape_.constant(current_index(wx), "X_cur")));
    const ad::NodeId tb = window_table(tape_.matmul_bt(E, P("W_B")), P("conv_B"), wb, "B");
    const ad::NodeId tc = window_table(tape_.matmul_bt(E, P("W_C")), P("conv_C"), wc, "C");
    ad::NodeId gate = ad::kNoNode;
    if (cfg_.gated()) gate = tape_.relu(tape_.matmul_bt(E, P("W_z")));

    std::vector<ad::NodeId> zs;
    ad::NodeId H = ad::kNoNode;
    for (std::size_t t = 0; t < length_; ++t) {
      const std::string s = std::to_string(t + 1);
      const ad::NodeId tok = tape_.input("tok" + s, {batch_, 1}, false);
      tok_ids_.push_back(tok);
      for (std::size_t k = 0; k < 3; ++k) {
        win_ids_[k].push_back(tape_.input(std::string("win") + "XBC"[k] + s, {batch_, 1}, false));
      }
      const ad::NodeId xt = tape_.gather_rows(tx, win_ids_[0][t]);
      const ad::NodeId bt = tape_.gather_rows(tb, win_ids_[1][t]);
      const ad::NodeId ct = tape_.gather_rows(tc, win_ids_[2][t]);
      const ad::NodeId at = tape_.gather_rows(a_tok, tok);
      a_.push_back(at);

      const ad::NodeId inject = tape_.outer_rows(xt, bt);
      H = t == 0 ? inject : tape_.add(tape_.mul(H, at), inject);
      ad::NodeId z = tape_.row_matvec(H, ct);
      if (cfg_.gated()) z = tape_.mul(z, tape_.gather_rows(gate, tok));
      zs.push_back(z);
    }

    // Position-wise part, all positions stacked: row (t-1)*B + b.
    const std::size_t rows = length_ * batch_;
    all_tok_ = tape_.input("tokens", {rows, 1}, false);
    targets_ = tape_.input("targets", {rows, 1}, false);
    const ad::NodeId u = tape_.add(tape_.gather_rows(E, all_tok_), tape_.matmul_bt(tape_.concat_rows(zs), P("W_o")));
    ad::NodeId v = u;
    if (cfg_.has_mlp()) {
      ad::NodeId h = tape_.relu(tape_.matmul_bt(u, P("W_1")));
      if (cfg_.use_gating) {
        const ad::NodeId h3 = tape_.matmul_bt(u, P("W_3"));
        h = cfg_.additive_mlp ? tape_.add(h, h3) : tape_.mul(h, h3);
      }
      v = tape_.add(u, tape_.matmul_bt(h, P("W_2")));
    }
    const ad::NodeId logits = tape_.matmul_bt(v, P("W_l"));
    probs_ = cfg_.head == Head::kSoftmax ? tape_.softmax_rows(logits)
                                         : tape_.l1_normalize_rows(logits, cfg_.l1_floor, false);
    tape_.set_label(probs_, "probs");
    tape_.mark_output("probs", probs_);

    // position t predicts token t+1; rows outside [start, T-1] carry weight 0
    Tensor weight(rows, 1);
    const std::size_t count = batch_ * (length_ - start_);
    for (std::size_t t = start_; t < length_; ++t) {
      for (std::size_t b = 0; b < batch_; ++b) weight[(t - 1) * batch_ + b] = -1.0 / static_cast<double>(count);
    }
    const ad::NodeId ll = tape_.log(tape_.pick(probs_, targets_));
    loss_ = tape_.sum(tape_.mul(ll, tape_.constant(std::move(weight), "loss_weight")));
    tape_.set_label(loss_, "loss");
    tape_.mark_output("loss", loss_);
  }

  MambaConfig cfg_;
  std::size_t batch_, length_, start_;
  ad::Tape tape_;
  std::map<std::string, ad::NodeId> param_ids_;
  std::vector<ad::NodeId> tok_ids_;
  std::vector<ad::NodeId> win_ids_[3];
  std::vector<ad::NodeId> a_;
  ad::NodeId all_tok_ = ad::kNoNode, targets_ = ad::kNoNode, probs_ = ad::kNoNode;
  ad::NodeId loss_ = ad::kNoNode;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "name[index]" of the worst coordinate
  double worst_analytic = 0.0, worst_numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares backward() against central differences of the loss on every
/// parameter coordinate; relative error |g - fd| / max(|g|, |fd|, floor max(1, |L|)).
/// Central differences at h = 1e-5 carry roundoff of order 1e-11 |L|, so
/// gradients below the floor are in effect compared absolutely.
inline GradCheckResult gradient_check(const MambaConfig& cfg, const MambaParams& params,
                                      std::span<const TokenSequence> seqs, std::size_t loss_start, double h = 1e-5,
                                      double floor = 1e-5) {
  TrainingGraph g(cfg, seqs.size(), seqs.front().size(), loss_start);
  g.bind_tokens(seqs);
  g.bind_params(params);
  const double scale = floor * std::max(1.0, std::abs(g.forward()));
  const MambaParams grads = g.backward();
  GradCheckResult res;
  MambaParams probe = params;
  probe.for_each([&](const std::string& name, Tensor& t) {
    const Tensor& an = const_cast<MambaParams&>(grads).slot(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double keep = t[i];
      t[i] = keep + h;
      g.bind_params(probe);
      const double up = g.forward();
      t[i] = keep - h;
      g.bind_params(probe);
      const double down = g.forward();
      t[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double err = std::abs(an[i] - fd) / std::max({std::abs(an[i]), std::abs(fd), scale});
      ++res.coordinates;
      if (err >= res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = name + "[" + std::to_string(i) + "]";
        res.worst_analytic = an[i];
        res.worst_numeric = fd;
      }
    }
  });
  return res;
}

}  // namespace markov_mamba
