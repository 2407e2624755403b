#pragma once

#include <functional>
#include <memory>
#include <unordered_map>

#include "md/kernels.hpp"
#include "md/skeleton.hpp"
#include "md/tensor.hpp"

namespace md {

// Recorded op graph for one forward pass. Each node carries the primal value,
// an optional forward-mode tangent (empty = zero, propagated dual-number style)
// and a reverse-mode gradient buffer. Nodes are appended in topological order.
struct Graph {
    using V = int;

    struct Node {
        Tensor val;
        Tensor tan;
        Tensor grad;
        std::function<void(Graph&)> back;  // null for leaves
    };

    std::vector<Node> nodes;

    V constant(Tensor v);
    V input(Tensor v, Tensor tan = {});
    V param(const Tensor& p);  // leaf; gradient retrievable via grad_of

    V add(V a, V b);
    V sub(V a, V b);
    V mul(V a, V b);
    V scale(V a, float s);
    V add_scalar(V a, float s);
    V matmul(V a, V b);
    V linear(V x, V w, V b);       // x*w + row-broadcast bias
    V mul_rows(V x, V v);          // x (T x C) ⊙ v (1 x C)
    V add_rows(V x, V v);
    V tile_rows(V v, int t);
    V concat_cols(V a, V b);
    V slice_cols(V a, int start, int len);
    V row(V a, int i);             // 1 x C view of row i
    V reverse_rows(V a);
    V sigmoid_(V a);
    V tanh_(V a);
    V exp_(V a);
    V silu(V a);
    V softplus_(V a);
    V rms_norm(V x, V gain);
    V conv1d(V x, V w, V b);       // causal depthwise
    V scan(V delta, V a, V b, V c, V x);
    V sin_embed(V t, int dim);
    V mean_all(V a);
    V sum_all(V a);
    V time_diff(V a, float fps);
    V fk(V motion, const Skeleton& skel);
    V stop_grad(V a);
    V mse(V a, V b);

    void backward(V loss);

    const Tensor& val(V id) const { return nodes[id].val; }
    const Tensor& tan(V id) const { return nodes[id].tan; }
    bool has_tan(V id) const { return !nodes[id].tan.empty(); }
    Tensor tan_or_zero(V id) const { return has_tan(id) ? nodes[id].tan : Tensor::zeros(nodes[id].val.shape); }
    Tensor grad_of(const Tensor& p) const;

  private:
    std::unordered_map<const float*, V> param_ids_;
    V push(Tensor v, Tensor tan, std::function<void(Graph&)> back);
    Tensor& gbuf(V id);
    // First contribution to a gradient buffer assigns (copy/move/scaled copy)
    // instead of zero-fill + add; later contributions accumulate. Results are
    // bit-identical to the zero-fill form.
    void accum(V id, const Tensor& g);
    void accum(V id, Tensor&& g);
    void accum_scaled(V id, float s, const Tensor& g);
    friend struct GraphOps;
};

// Plain-tensor evaluation of the same op set (no derivatives); used for
// sampling and for the finite-difference tangent mode.
struct EvalCtx {
    using V = Tensor;

    V constant(Tensor v) { return v; }
    V input(Tensor v, Tensor = {}) { return v; }
    V param(const Tensor& p) { return p; }

    V add(const V& a, const V& b) { return ew_add(a, b); }
    V sub(const V& a, const V& b) { return ew_sub(a, b); }
    V mul(const V& a, const V& b) { return ew_mul(a, b); }
    V scale(const V& a, float s) { return ew_scale(a, s); }
    V add_scalar(const V& a, float s) {
        return map(a, [s](float x) { return x + s; });
    }
    V matmul(const V& a, const V& b) { return md::matmul(a, b); }
    V linear(const V& x, const V& w, const V& b);
    V mul_rows(const V& x, const V& v);
    V add_rows(const V& x, const V& v);
    V tile_rows(const V& v, int t);
    V concat_cols(const V& a, const V& b);
    V slice_cols(const V& a, int start, int len);
    V row(const V& a, int i);
    V reverse_rows(const V& a);
    V sigmoid_(const V& a) {
        return map(a, [](float x) { return 1.0f / (1.0f + fast_expf(-x)); });
    }
    V tanh_(const V& a) {
        return map(a, [](float x) { return std::tanh(x); });
    }
    V exp_(const V& a) {
        return map(a, [](float x) { return fast_expf(x); });
    }
    V silu(const V& a) {
        return map(a, [](float x) { return x / (1.0f + fast_expf(-x)); });
    }
    V softplus_(const V& a);
    V rms_norm(const V& x, const V& gain);
    V conv1d(const V& x, const V& w, const V& b) { return conv1d_causal(x, w, b); }
    V scan(const V& delta, const V& a, const V& b, const V& c, const V& x) {
        return ssm_scan(delta, a, b, c, x, nullptr);
    }
    V sin_embed(const V& t, int dim);
    V mean_all(const V& a);
    V sum_all(const V& a);
    V time_diff(const V& a, float fps) { return frame_velocities(a, fps); }
    V fk(const V& motion, const Skeleton& skel) { return fk_positions(motion, skel); }
    V stop_grad(const V& a) { return a; }
    V mse(const V& a, const V& b);
};

Tensor sinusoidal_embedding(float t, int dim);

// Central difference (f(x + h v) - f(x - h v)) / 2h, the directional-derivative oracle.
Tensor finite_diff_directional(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                               const std::vector<Tensor>& inputs, const std::vector<Tensor>& tangents,
                               float h);

}  // namespace md
