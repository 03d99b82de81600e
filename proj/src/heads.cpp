#include "felrec/heads.hpp"

#include <cmath>

#include <algorithm>

#include "felrec/optim.hpp"

namespace felrec {

MlpParams init_mlp(std::int64_t in, std::int64_t hidden, std::int64_t out, HeadNorm norm,
                   const std::string& name, Rng& rng) {
  MlpParams p;
  const real s1 = real(1) / std::sqrt(static_cast<real>(in));
  const real s2 = real(1) / std::sqrt(static_cast<real>(hidden));
  p.l1 = {Tensor::param({in, hidden}, truncated_normal(in * hidden, s1, rng), name + ".l1.w"),
          Tensor::param({hidden}, std::vector<real>(static_cast<std::size_t>(hidden), real(0)),
                        name + ".l1.b")};
  p.norm_kind = norm;
  p.gamma = Tensor::param({hidden}, std::vector<real>(static_cast<std::size_t>(hidden), real(1)),
                          name + ".norm.g");
  p.beta = Tensor::param({hidden}, std::vector<real>(static_cast<std::size_t>(hidden), real(0)),
                         name + ".norm.b");
  p.running_mean.assign(static_cast<std::size_t>(hidden), real(0));
  p.running_var.assign(static_cast<std::size_t>(hidden), real(1));
  p.l2 = {Tensor::param({hidden, out}, truncated_normal(hidden * out, s2, rng), name + ".l2.w"),
          Tensor::param({out}, std::vector<real>(static_cast<std::size_t>(out), real(0)),
                        name + ".l2.b")};
  return p;
}

Tensor mlp_forward(MlpParams& p, const Tensor& x, RunMode mode, bool track_running) {
  Tensor h = linear(p.l1, x);
  if (p.norm_kind == HeadNorm::batch)
    h = batch_norm(h, p.gamma, p.beta, &p.running_mean, &p.running_var, mode == RunMode::train,
                   real(0.1), real(1e-5), track_running);
  else
    h = layer_norm(h, p.gamma, p.beta);
  return linear(p.l2, relu(h));
}

NegativeQueue::NegativeQueue(std::int64_t capacity, std::int64_t dim)
    : capacity_(capacity), dim_(dim) {
  if (capacity <= 0 || dim <= 0) throw NumericError("queue: capacity and dim must be positive");
  buf_.resize(static_cast<std::size_t>(capacity * dim));
}

void NegativeQueue::enqueue(const Tensor& rows) {
  if (rows.rank() != 2 || rows.dim(1) != dim_)
    throw NumericError("queue enqueue: expected (n," + std::to_string(dim_) + "), got " +
                       shape_str(rows.shape()));
  const auto& v = rows.values();
  for (std::int64_t r = 0; r < rows.dim(0); ++r) {
    std::copy(v.begin() + r * dim_, v.begin() + (r + 1) * dim_, buf_.begin() + head_ * dim_);
    head_ = (head_ + 1) % capacity_;
    fill_ = std::min(fill_ + 1, capacity_);
  }
}

Tensor NegativeQueue::contents() const {
  std::vector<real> out(static_cast<std::size_t>(fill_ * dim_));
  const std::int64_t oldest = fill_ < capacity_ ? 0 : head_;
  for (std::int64_t i = 0; i < fill_; ++i) {
    const std::int64_t src = (oldest + i) % capacity_;
    std::copy(buf_.begin() + src * dim_, buf_.begin() + (src + 1) * dim_, out.begin() + i * dim_);
  }
  return Tensor::from({fill_, dim_}, std::move(out));
}

void NegativeQueue::clear() {
  head_ = 0;
  fill_ = 0;
}

Tensor infonce_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negatives,
                    real tau) {
  if (tau <= 0) throw NumericError("infonce: temperature must be positive, got " + std::to_string(tau));
  if (anchor.rank() != 2 || anchor.shape() != positive.shape())
    throw NumericError("infonce: anchor " + shape_str(anchor.shape()) + " vs positive " +
                       shape_str(positive.shape()));
  const real inv_tau = real(1) / tau;
  Tensor pos_logit = scale(rowwise_dot(anchor, positive), inv_tau);  // (B)
  Tensor logits;
  if (negatives.defined() && negatives.size() > 0) {
    if (negatives.rank() != 2 || negatives.dim(1) != anchor.dim(1))
      throw NumericError("infonce: negatives " + shape_str(negatives.shape()) +
                         " incompatible with anchor " + shape_str(anchor.shape()));
    Tensor neg_logits = scale(matmul(anchor, transpose_last2(negatives)), inv_tau);  // (B,K)
    logits = concat_last(reshape(pos_logit, {anchor.dim(0), 1}), neg_logits);
  } else {
    logits = reshape(pos_logit, {anchor.dim(0), 1});
  }
  return mean_all(sub(logsumexp_rows(logits), pos_logit));
}

Tensor byol_loss(const Tensor& prediction, const Tensor& target) {
  if (prediction.rank() != 2 || prediction.shape() != target.shape())
    throw NumericError("byol: prediction " + shape_str(prediction.shape()) + " vs target " +
                       shape_str(target.shape()));
  Tensor cos = rowwise_dot(l2_normalize_rows(prediction), l2_normalize_rows(target));
  return mean_all(shift(scale(cos, real(-2)), real(2)));
}

namespace {

// Hidden "double the model dimension", output half of it.
std::int64_t p_hidden(std::int64_t d) { return 2 * d; }
std::int64_t p_out(std::int64_t d) { return d / 2; }

}  // namespace

HeadsQ init_heads_q(std::int64_t d, HeadNorm norm, bool no_mlp, bool share_mlp, Rng& rng) {
  HeadsQ h;
  h.no_mlp = no_mlp;
  h.share_mlp = share_mlp;
  if (no_mlp) return h;
  h.g_user = init_mlp(d, d, d, norm, share_mlp ? "heads.g" : "heads.g_user", rng);
  h.g_item = share_mlp ? h.g_user : init_mlp(d, d, d, norm, "heads.g_item", rng);
  return h;
}

HeadsP init_heads_p(std::int64_t d, HeadNorm norm, bool no_mlp, bool share_mlp, Rng& rng) {
  HeadsP h;
  h.no_mlp = no_mlp;
  h.share_mlp = share_mlp;
  if (no_mlp) return h;
  h.g_user = init_mlp(d, p_hidden(d), p_out(d), norm, share_mlp ? "heads.g" : "heads.g_user", rng);
  h.g_item = share_mlp ? h.g_user : init_mlp(d, p_hidden(d), p_out(d), norm, "heads.g_item", rng);
  h.h_user = init_mlp(p_out(d), p_hidden(d), p_out(d), norm, "heads.h_user", rng);
  h.h_item = init_mlp(p_out(d), p_hidden(d), p_out(d), norm, "heads.h_item", rng);
  return h;
}

Tensor project_q(HeadsQ& h, EntityKind side, const Tensor& repr, RunMode mode) {
  if (h.no_mlp) return repr;
  // With shared projections both sides run through one instance so the
  // batch-norm running buffers stay in sync with the shared weights.
  MlpParams& mlp = h.share_mlp || side == EntityKind::user ? h.g_user : h.g_item;
  return mlp_forward(mlp, repr, mode);
}

Tensor loss_q(const Tensor& u_repr, const Tensor& x_repr, HeadsQ& heads, NegativeQueue& user_queue,
              NegativeQueue& item_queue, real tau, RunMode mode) {
  Tensor u_proj = project_q(heads, EntityKind::user, u_repr, mode);
  Tensor x_proj = project_q(heads, EntityKind::item, x_repr, mode);

  // Negatives as of entry; the positive of each direction is detached.
  Tensor loss_user = infonce_loss(u_proj, stop_gradient(x_proj), item_queue.contents(), tau);
  Tensor loss_item = infonce_loss(x_proj, stop_gradient(u_proj), user_queue.contents(), tau);
  Tensor loss = add(loss_user, loss_item);

  item_queue.enqueue(x_proj.detach());
  user_queue.enqueue(u_proj.detach());
  return loss;
}

Tensor loss_p(const Tensor& u_repr, const Tensor& x_repr, HeadsP& heads, RunMode mode) {
  if (heads.no_mlp) {
    Tensor loss_user = byol_loss(u_repr, stop_gradient(x_repr));
    Tensor loss_item = byol_loss(x_repr, stop_gradient(u_repr));
    return add(loss_user, loss_item);
  }
  Tensor u_proj = mlp_forward(heads.g_user, u_repr, mode);
  Tensor x_proj = mlp_forward(heads.share_mlp ? heads.g_user : heads.g_item, x_repr, mode);
  Tensor u_pred = mlp_forward(heads.h_user, u_proj, mode);
  Tensor x_pred = mlp_forward(heads.h_item, x_proj, mode);
  Tensor loss_user = byol_loss(u_pred, stop_gradient(x_proj));
  Tensor loss_item = byol_loss(x_pred, stop_gradient(u_proj));
  return add(loss_user, loss_item);
}

}  // namespace felrec
