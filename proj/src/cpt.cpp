#include "ulast/cpt.hpp"

#include "ulast/error.hpp"

namespace ulast {

Var mask_search(Var search_feat, Var mask) { return mul_channels(search_feat, mask); }

Retrieval retrieve(const Bound& net, Var masked_search, Var query_source, Query which, AttentionAxis axis) {
  const auto& qs = query_source.shape();
  const auto& ss = masked_search.shape();
  if (qs.size() != 3 || ss.size() != 3) throw ShapeError("retrieve: expected C x h x w inputs");
  if (qs[0] != ss[0])
    throw ShapeError("retrieve: channel mismatch " + shape_str(qs) + " vs " + shape_str(ss));
  const std::size_t C = qs[0], Nz = qs[1] * qs[2], Nx = ss[1] * ss[2];

  Var q = reshape(conv2d(query_source, net[which == Query::Long ? "cpt.q_long.w" : "cpt.q_short.w"], 1, 0), {C, Nz});
  Var k = reshape(conv2d(masked_search, net["cpt.key.w"], 1, 0), {C, Nx});
  Var v = reshape(conv2d(masked_search, net["cpt.value.w"], 1, 0), {C, Nx});
  Var affinity = matmul(transpose(q), k);  // [Nz x Nx]
  Var a = softmax_axis(affinity, axis == AttentionAxis::Search ? 1 : 0);
  Var x = transpose(matmul(a, transpose(v)));  // [C x Nz]
  return {reshape(x, qs), a};
}

namespace {

Var conv_norm(const Bound& net, const std::string& prefix, Var x) {
  return norm_affine(conv2d(x, net[prefix + ".w"], 1, 1), net[prefix + ".gain"], net[prefix + ".bias"]);
}

}  // namespace

Var update_hidden(const Bound& net, Var x_long, Var t1) {
  if (x_long.shape() != t1.shape())
    throw ShapeError("update_hidden: " + shape_str(x_long.shape()) + " vs " + shape_str(t1.shape()));
  return conv_norm(net, "cpt.f", concat0(x_long, t1));
}

CptOutput cpt_forward(const Bound& net, Var search_feat, Var mask, Var t1, Var hidden_prev, const CptOptions& opts) {
  if (!hidden_prev.valid()) throw ContractError("cpt_forward: missing hidden template");
  if (hidden_prev.shape() != t1.shape())
    throw ShapeError("cpt_forward: hidden " + shape_str(hidden_prev.shape()) + " vs template " +
                     shape_str(t1.shape()));
  Tape& tape = t1.tape();
  Var masked = mask_search(search_feat, mask);
  CptOutput out;
  out.long_term = retrieve(net, masked, t1, Query::Long, opts.axis);
  out.short_term = retrieve(net, masked, hidden_prev, Query::Short, opts.axis);
  Var zeros = tape.constant(Tensor(t1.shape()));
  Var xl = opts.terms == CptTerms::ShortOnly ? zeros : out.long_term.features;
  Var xs = opts.terms == CptTerms::LongOnly ? zeros : out.short_term.features;
  out.kernel = conv_norm(net, "cpt.h", concat0(xs, xl));
  if (opts.residual) out.kernel = add(out.kernel, t1);
  out.hidden = update_hidden(net, xl, t1);
  return out;
}

}  // namespace ulast
