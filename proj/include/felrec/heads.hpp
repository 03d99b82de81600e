#pragma once

#include <cstdint>
#include <vector>

#include "felrec/encoder.hpp"
#include "felrec/tensor.hpp"

namespace felrec {

enum class HeadNorm : std::uint8_t { batch = 0, layer = 1 };

// Hidden linear -> normalization -> ReLU -> output linear.
struct MlpParams {
  LinearLayer l1;
  HeadNorm norm_kind = HeadNorm::batch;
  Tensor gamma, beta;
  std::vector<real> running_mean, running_var;  // batch-norm buffers
  LinearLayer l2;
};

MlpParams init_mlp(std::int64_t in, std::int64_t hidden, std::int64_t out, HeadNorm norm,
                   const std::string& name, Rng& rng);
Tensor mlp_forward(MlpParams& p, const Tensor& x, RunMode mode, bool track_running = true);

// Fixed-capacity FIFO of detached projection vectors used as negatives.
class NegativeQueue {
 public:
  NegativeQueue(std::int64_t capacity, std::int64_t dim);

  std::int64_t capacity() const { return capacity_; }
  std::int64_t dim() const { return dim_; }
  std::int64_t fill() const { return fill_; }

  // Appends each row; once full, the oldest entries are evicted.
  void enqueue(const Tensor& rows);
  // (fill, dim) constant tensor, oldest first.
  Tensor contents() const;
  void clear();

 private:
  std::int64_t capacity_, dim_;
  std::vector<real> buf_;  // ring, capacity * dim
  std::int64_t head_ = 0;  // next write slot
  std::int64_t fill_ = 0;
};

// -log( exp(a·p/τ) / (exp(a·p/τ) + Σ_i exp(a·n_i/τ)) ), averaged over the
// anchor rows. Similarity is the raw dot product; negatives may be empty.
Tensor infonce_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negatives,
                    real tau);

// 2 - 2·cos(prediction, target) per row, averaged; range [0, 4].
Tensor byol_loss(const Tensor& prediction, const Tensor& target);

struct HeadsQ {
  bool no_mlp = false;
  bool share_mlp = false;
  MlpParams g_user, g_item;  // aliases one parameter set when share_mlp
};

struct HeadsP {
  bool no_mlp = false;
  bool share_mlp = false;
  MlpParams g_user, g_item;
  MlpParams h_user, h_item;
};

HeadsQ init_heads_q(std::int64_t model_dim, HeadNorm norm, bool no_mlp, bool share_mlp, Rng& rng);
HeadsP init_heads_p(std::int64_t model_dim, HeadNorm norm, bool no_mlp, bool share_mlp, Rng& rng);

Tensor project_q(HeadsQ& h, EntityKind side, const Tensor& repr, RunMode mode);

// Queue-contrastive loss, both directions, stop-gradient on the opposite
// branch. Negatives are the queue contents as of entry; the fresh projections
// are enqueued (detached) after the loss is built.
Tensor loss_q(const Tensor& u_repr, const Tensor& x_repr, HeadsQ& heads, NegativeQueue& user_queue,
              NegativeQueue& item_queue, real tau, RunMode mode);

// Predictor-similarity loss, both directions, stop-gradient on the target
// branch. Returns loss and the detached projections are not retained.
Tensor loss_p(const Tensor& u_repr, const Tensor& x_repr, HeadsP& heads, RunMode mode);

}  // namespace felrec
