#pragma once

// Attention-only decoder over a text-then-visual token sequence:
//   h^{l+1} = h^l + sum_n [A_n^l(h^l) + e_{l,n}] P_n^l,      logits = h^L[final] W_out + b_out
// A_n^l is causal softmax attention of head n, P_n^l the n-th d x D row block of the layer's
// output projection and e_{l,n} an optional additive edit. Activations z = A_n^l(h^l) are
// recorded before projection and before any edit.
//
// Visual tokens are slot feature rows mapped by an affine projection; the model appends a learned
// image-end marker as the last visual token, so the answer is always predicted from a position
// whose own embedding carries no slot content.

#include <functional>
#include <optional>

#include "scalpel/activation_store.hpp"

namespace scalpel {

namespace vocab {
inline constexpr int kBos = 0;
inline constexpr int kAsk = 1;
inline constexpr int kYes = 2;
inline constexpr int kNo = 3;
inline constexpr int kEos = 4;
inline constexpr int kFirstObject = 5;
inline int object_token(int object) { return kFirstObject + object; }
}  // namespace vocab

struct ModelConfig {
    int layers = 4;
    int heads = 8;
    int head_dim = 16;
    int vocab = 64;
    int context = 64;
    int visual_dim = 8;

    int model_dim() const { return heads * head_dim; }

    void validate() const {
        require(layers >= 1 && heads >= 1 && head_dim >= 1, "model dimensions must be positive");
        require(vocab > vocab::kFirstObject, "vocabulary too small");
        require(context >= 2 && visual_dim >= 1, "model dimensions must be positive");
    }

    Json to_json() const {
        return Json{{"layers", layers}, {"heads", heads},     {"head_dim", head_dim},
                    {"vocab", vocab},   {"context", context}, {"visual_dim", visual_dim}};
    }

    static ModelConfig from_json(const Json& j) {
        ModelConfig c;
        c.layers = j.value("layers", c.layers);
        c.heads = j.value("heads", c.heads);
        c.head_dim = j.value("head_dim", c.head_dim);
        c.vocab = j.value("vocab", c.vocab);
        c.context = j.value("context", c.context);
        c.visual_dim = j.value("visual_dim", c.visual_dim);
        c.validate();
        return c;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct TokenSequence {
    std::vector<int> text;       // x_1..x_M
    Matrix visual;               // one row of slot features per visual token
    std::vector<int> generated;  // answer tokens produced so far

    Index text_tokens() const { return static_cast<Index>(text.size()); }
    Index visual_tokens() const { return visual.rows() + 1; }  // + image-end marker
    Index length() const { return text_tokens() + visual_tokens() + static_cast<Index>(generated.size()); }
    Index final_position() const { return length() - 1; }
};

struct HookRecord {
    int step = 0;
    int position = 0;
    int layer = 0;
    int head = 0;
    Vector z;
};

/// Fixed additive edit e_{l,n} at one position (-1 means the final position).
struct Edit {
    int position = -1;
    int layer = 0;
    int head = 0;
    Vector delta;
};

/// Edits chosen from the live activation at the final position, once per listed head.
struct EditProvider {
    std::vector<HeadId> heads;
    std::function<Vector(std::size_t sequence, const HookRecord&)> edit;
};

struct ForwardOptions {
    std::vector<Edit> edits;
    const EditProvider* provider = nullptr;
    std::optional<int> record_position;  // record every head at this position (-1 = final)
    bool record_all_positions = false;
    int step = 0;
};

// ---------------------------------------------------------------------------------------------
// Parameters

template <class S>
struct Params {
    using M = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

    M token;       // V x D
    M position;    // context x D
    M visual_w;    // F x D
    M visual_b;    // 1 x D
    M visual_end;  // 1 x D
    std::vector<M> wq, wk, wv;  // D x D, head n owns columns [n d, (n+1) d)
    std::vector<M> wo;          // D x D, rows [n d, (n+1) d) are P_n
    M out_w;                    // D x V
    M out_b;                    // 1 x V

    static Params zeros(const ModelConfig& c) {
        const Index d = c.model_dim();
        Params p;
        p.token = M::Zero(c.vocab, d);
        p.position = M::Zero(c.context, d);
        p.visual_w = M::Zero(c.visual_dim, d);
        p.visual_b = M::Zero(1, d);
        p.visual_end = M::Zero(1, d);
        for (int l = 0; l < c.layers; ++l)
            for (auto* w : {&p.wq, &p.wk, &p.wv, &p.wo}) w->push_back(M::Zero(d, d));
        p.out_w = M::Zero(d, c.vocab);
        p.out_b = M::Zero(1, c.vocab);
        return p;
    }

    template <class F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    template <class T>
    Params<T> cast() const {
        Params<T> out;
        out.token = token.template cast<T>();
        out.position = position.template cast<T>();
        out.visual_w = visual_w.template cast<T>();
        out.visual_b = visual_b.template cast<T>();
        out.visual_end = visual_end.template cast<T>();
        auto cast_all = [](const std::vector<M>& in) {
            std::vector<typename Params<T>::M> o;
            for (const auto& m : in) o.push_back(m.template cast<T>());
            return o;
        };
        out.wq = cast_all(wq);
        out.wk = cast_all(wk);
        out.wv = cast_all(wv);
        out.wo = cast_all(wo);
        out.out_w = out_w.template cast<T>();
        out.out_b = out_b.template cast<T>();
        return out;
    }

private:
    template <class P, class F>
    static void visit_impl(P& p, F& f) {
        f(std::string("token"), p.token);
        f(std::string("position"), p.position);
        f(std::string("visual_w"), p.visual_w);
        f(std::string("visual_b"), p.visual_b);
        f(std::string("visual_end"), p.visual_end);
        for (std::size_t l = 0; l < p.wq.size(); ++l) {
            const std::string pre = "layer" + std::to_string(l) + ".";
            f(pre + "wq", p.wq[l]);
            f(pre + "wk", p.wk[l]);
            f(pre + "wv", p.wv[l]);
            f(pre + "wo", p.wo[l]);
        }
        f(std::string("out_w"), p.out_w);
        f(std::string("out_b"), p.out_b);
    }
};

class ToyModel {
public:
    ToyModel() = default;

    /// Random initialization, rounded to f32 so checkpoints round-trip exactly.
    ToyModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
        cfg_.validate();
        params_ = Params<double>::zeros(cfg_);
        Rng rng(seed);
        const double dim = cfg_.model_dim();
        auto fill = [&](Matrix& m, double scale) {
            for (Index j = 0; j < m.cols(); ++j)
                for (Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<float>(scale * rng.normal());
        };
        fill(params_.token, 0.5);
        fill(params_.position, 0.5);
        fill(params_.visual_w, 0.5 / std::sqrt(double(cfg_.visual_dim)));
        fill(params_.visual_end, 0.5);
        for (int l = 0; l < cfg_.layers; ++l) {
            fill(params_.wq[l], 1.0 / std::sqrt(dim));
            fill(params_.wk[l], 1.0 / std::sqrt(dim));
            fill(params_.wv[l], 1.0 / std::sqrt(dim));
            fill(params_.wo[l], 0.5 / std::sqrt(dim));
        }
        fill(params_.out_w, 1.0 / std::sqrt(dim));
    }

    ToyModel(ModelConfig cfg, std::uint64_t seed, Params<double> params)
        : cfg_(cfg), seed_(seed), params_(std::move(params)) {
        cfg_.validate();
        check_shapes();
    }

    const ModelConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    const Params<double>& params() const { return params_; }

    void set_params(Params<double> p) {
        params_ = std::move(p);
        check_shapes();
    }

    /// P_n^l as a d x D block.
    Matrix projection(int layer, int head) const {
        return params_.wo.at(static_cast<std::size_t>(layer)).middleRows(head * cfg_.head_dim, cfg_.head_dim);
    }

private:
    void check_shapes() const {
        const auto ref = Params<double>::zeros(cfg_);
        std::vector<std::pair<Index, Index>> want, have;
        ref.visit([&](const std::string&, const Matrix& m) { want.emplace_back(m.rows(), m.cols()); });
        params_.visit([&](const std::string&, const Matrix& m) {
            have.emplace_back(m.rows(), m.cols());
            if (!m.allFinite()) throw ValidationError("non-finite model parameter");
        });
        require(want == have, "parameter shapes do not match model config");
    }

    ModelConfig cfg_;
    std::uint64_t seed_ = 0;
    Params<double> params_;
};

// ---------------------------------------------------------------------------------------------
// Shared forward pieces (used by inference in double and training in float)

namespace detail {

inline void check_sequence(const ModelConfig& c, const TokenSequence& s) {
    require(!s.text.empty(), "sequence needs at least one text token");
    require(s.visual.rows() >= 1, "sequence needs at least one visual token");
    require(s.visual.cols() == c.visual_dim, "visual feature width does not match model");
    require(s.length() <= c.context, "sequence exceeds model context");
    require(s.visual.allFinite(), "non-finite visual features");
    for (const auto* part : {&s.text, &s.generated})
        for (int t : *part) require(t >= 0 && t < c.vocab, "token id out of range");
}

/// Writes the T x D input embedding of one sequence into rows [row0, row0 + T) of x.
template <class S, class Out>
void embed(const Params<S>& p, const TokenSequence& s, Out&& x, Index row0) {
    Index t = 0;
    for (int tok : s.text) {
        x.row(row0 + t) = p.token.row(tok) + p.position.row(t);
        ++t;
    }
    for (Index i = 0; i < s.visual.rows(); ++i, ++t)
        x.row(row0 + t) = s.visual.row(i).template cast<S>() * p.visual_w + p.visual_b + p.position.row(t);
    x.row(row0 + t) = p.visual_end + p.position.row(t);
    ++t;
    for (int tok : s.generated) {
        x.row(row0 + t) = p.token.row(tok) + p.position.row(t);
        ++t;
    }
}

template <class S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
struct LayerCache {
    typename Params<S>::M x;
    RowMatrix<S> q, k, v, z;
    std::vector<S> attn;  // per (sequence, head) a row-major T x T block
};

/// Per-head causal softmax attention on row-major (B T) x D blocks. FixedD > 0 fixes the head
/// width at compile time so the inner loops vectorize.
template <class S, int FixedD>
void attention_forward(const RowMatrix<S>& q, const RowMatrix<S>& k, const RowMatrix<S>& v, RowMatrix<S>& z,
                       S* attn, Index batch, Index heads, Index len, Index d_runtime, S scale) {
    const Index d = FixedD > 0 ? FixedD : d_runtime;
    const Index dim = q.cols();
    std::vector<S> local(static_cast<std::size_t>(len * len));
    for (Index b = 0; b < batch; ++b)
        for (Index n = 0; n < heads; ++n) {
            S* a = attn ? attn + (b * heads + n) * len * len : local.data();
            const Index off = b * len * dim + n * d;
            const S* qn = q.data() + off;
            const S* kn = k.data() + off;
            const S* vn = v.data() + off;
            S* zn = z.data() + off;
            for (Index i = 0; i < len; ++i) {
                S* ai = a + i * len;
                S m = -std::numeric_limits<S>::infinity();
                for (Index j = 0; j <= i; ++j) {
                    S dot = 0;
                    for (Index t = 0; t < d; ++t) dot += qn[i * dim + t] * kn[j * dim + t];
                    ai[j] = dot * scale;
                    m = std::max(m, ai[j]);
                }
                S sum = 0;
                for (Index j = 0; j <= i; ++j) sum += (ai[j] = std::exp(ai[j] - m));
                for (Index j = 0; j <= i; ++j) ai[j] /= sum;
                for (Index j = i + 1; j < len; ++j) ai[j] = 0;
                for (Index j = 0; j <= i; ++j)
                    for (Index t = 0; t < d; ++t) zn[i * dim + t] += ai[j] * vn[j * dim + t];
            }
        }
}

/// Gradients of attention_forward with respect to q, k and v (accumulated into dq, dk, dv).
template <class S, int FixedD>
void attention_backward(const LayerCache<S>& cache, const RowMatrix<S>& dz, RowMatrix<S>& dq, RowMatrix<S>& dk,
                        RowMatrix<S>& dv, Index batch, Index heads, Index len, Index d_runtime, S scale) {
    const Index d = FixedD > 0 ? FixedD : d_runtime;
    const Index dim = dz.cols();
    std::vector<S> da(static_cast<std::size_t>(len));
    for (Index b = 0; b < batch; ++b)
        for (Index n = 0; n < heads; ++n) {
            const S* a = cache.attn.data() + (b * heads + n) * len * len;
            const Index off = b * len * dim + n * d;
            const S* dzn = dz.data() + off;
            const S* qn = cache.q.data() + off;
            const S* kn = cache.k.data() + off;
            const S* vn = cache.v.data() + off;
            S* dqn = dq.data() + off;
            S* dkn = dk.data() + off;
            S* dvn = dv.data() + off;
            for (Index i = 0; i < len; ++i) {
                const S* ai = a + i * len;
                S rowdot = 0;
                for (Index j = 0; j <= i; ++j) {
                    S dot = 0;
                    for (Index t = 0; t < d; ++t) dot += dzn[i * dim + t] * vn[j * dim + t];
                    da[std::size_t(j)] = dot;
                    rowdot += dot * ai[j];
                    for (Index t = 0; t < d; ++t) dvn[j * dim + t] += ai[j] * dzn[i * dim + t];
                }
                for (Index j = 0; j <= i; ++j) {
                    const S ds = ai[j] * (da[std::size_t(j)] - rowdot) * scale;
                    for (Index t = 0; t < d; ++t) {
                        dqn[i * dim + t] += ds * kn[j * dim + t];
                        dkn[j * dim + t] += ds * qn[i * dim + t];
                    }
                }
            }
        }
}

/// Causal multi-head attention for a batch of equal-length sequences stacked as (B T) x D.
/// Returns the concatenated pre-projection head outputs Z. Rows are contiguous, so the per-head
/// kernels below are plain strided loops over d-long runs.
template <class S>
RowMatrix<S> attend(const Params<S>& p, const ModelConfig& c, int layer, const typename Params<S>::M& x,
                    Index batch, Index len, LayerCache<S>* cache) {
    const auto l = static_cast<std::size_t>(layer);
    const Index d = c.head_dim;
    const Index dim = x.cols();
    RowMatrix<S> q = x * p.wq[l];
    RowMatrix<S> k = x * p.wk[l];
    RowMatrix<S> v = x * p.wv[l];
    RowMatrix<S> z = RowMatrix<S>::Zero(x.rows(), dim);
    const S scale = S(1) / std::sqrt(S(d));
    if (cache) cache->attn.assign(static_cast<std::size_t>(batch * c.heads * len * len), S(0));
    if (d == 16)
        attention_forward<S, 16>(q, k, v, z, cache ? cache->attn.data() : nullptr, batch, c.heads, len, d, scale);
    else
        attention_forward<S, 0>(q, k, v, z, cache ? cache->attn.data() : nullptr, batch, c.heads, len, d, scale);
    if (cache) {
        cache->x = x;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->z = z;
    }
    return z;
}

/// x += z W, accumulated per element in ascending order of the inner index. Inference uses this
/// fixed order (instead of a blocked GEMM) so the residual update of any single row can be
/// reproduced exactly by a plain loop.
inline void add_projection(Matrix& x, const RowMatrix<double>& z, const Matrix& w) {
    constexpr Index kTile = 32;  // rows per tile, so a tile of z stays in L1
    const Matrix zc = z;
    for (Index r0 = 0; r0 < x.rows(); r0 += kTile) {
        const Index rn = std::min(kTile, x.rows() - r0);
        for (Index j = 0; j < w.cols(); ++j) {
            double* __restrict xj = x.col(j).data() + r0;
            for (Index k = 0; k < w.rows(); ++k) {
                const double wkj = w(k, j);
                const double* __restrict zk = zc.col(k).data() + r0;
                for (Index r = 0; r < rn; ++r) xj[r] += zk[r] * wkj;
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Inference

struct BatchOutput {
    Matrix logits;                                 // B x V
    std::vector<std::vector<HookRecord>> records;  // per sequence
};

/// Forward pass over equal-length sequences. With no edits and no provider the result is the
/// plain (unhooked) forward: recording never alters any value.
inline BatchOutput forward_batch(const ToyModel& model, const std::vector<const TokenSequence*>& seqs,
                                 const ForwardOptions& opt = {}) {
    const auto& c = model.config();
    const auto& p = model.params();
    require(!seqs.empty(), "empty batch");
    const Index len = seqs.front()->length();
    const Index batch = static_cast<Index>(seqs.size());
    const Index dim = c.model_dim();
    for (const auto* s : seqs) {
        detail::check_sequence(c, *s);
        require(s->length() == len, "batch sequences differ in length");
    }
    for (const auto& e : opt.edits) {
        require(e.layer >= 0 && e.layer < c.layers && e.head >= 0 && e.head < c.heads, "invalid head index");
        require(e.delta.size() == c.head_dim, "edit dimension does not match head dimension");
        require(e.position >= -1 && e.position < len, "edit position out of range");
    }
    if (opt.provider)
        for (const auto& h : opt.provider->heads)
            require(h.layer >= 0 && h.layer < c.layers && h.head >= 0 && h.head < c.heads, "invalid head index");
    std::optional<Index> rec_pos;
    if (opt.record_position) {
        rec_pos = *opt.record_position < 0 ? len + *opt.record_position : *opt.record_position;
        require(*rec_pos >= 0 && *rec_pos < len, "record position out of range");
    }

    Matrix x(batch * len, dim);
    for (Index b = 0; b < batch; ++b) detail::embed(p, *seqs[static_cast<std::size_t>(b)], x, b * len);

    BatchOutput out;
    out.records.resize(seqs.size());
    for (int l = 0; l < c.layers; ++l) {
        detail::RowMatrix<double> z = detail::attend<double>(p, c, l, x, batch, len, nullptr);
        for (Index b = 0; b < batch; ++b) {
            auto& recs = out.records[static_cast<std::size_t>(b)];
            for (int n = 0; n < c.heads; ++n) {
                auto block = z.block(b * len, n * c.head_dim, len, c.head_dim);
                if (opt.record_all_positions)
                    for (Index t = 0; t < len; ++t)
                        recs.push_back({opt.step, int(t), l, n, block.row(t).transpose()});
                else if (rec_pos)
                    recs.push_back({opt.step, int(*rec_pos), l, n, block.row(*rec_pos).transpose()});
            }
            for (const auto& e : opt.edits)
                if (e.layer == l) {
                    const Index pos = e.position < 0 ? len - 1 : e.position;
                    z.block(b * len + pos, e.head * c.head_dim, 1, c.head_dim) += e.delta.transpose();
                }
            if (opt.provider)
                for (const auto& h : opt.provider->heads) {
                    if (h.layer != l) continue;
                    auto row = z.block(b * len + len - 1, h.head * c.head_dim, 1, c.head_dim);
                    const HookRecord rec{opt.step, int(len - 1), l, h.head, row.transpose()};
                    const Vector delta = opt.provider->edit(static_cast<std::size_t>(b), rec);
                    if (delta.size() != c.head_dim)
                        throw ValidationError("edit dimension does not match head dimension");
                    row += delta.transpose();
                }
        }
        detail::add_projection(x, z, p.wo[static_cast<std::size_t>(l)]);
    }
    out.logits.resize(batch, c.vocab);
    for (Index b = 0; b < batch; ++b) out.logits.row(b) = x.row(b * len + len - 1) * p.out_w + p.out_b;
    return out;
}

struct ForwardResult {
    Vector logits;
    std::vector<HookRecord> records;
};

inline ForwardResult forward(const ToyModel& model, const TokenSequence& seq, const ForwardOptions& opt = {}) {
    auto out = forward_batch(model, {&seq}, opt);
    return {out.logits.row(0).transpose(), std::move(out.records.front())};
}

inline Vector softmax(const Eigen::Ref<const Vector>& logits) {
    const Vector e = (logits.array() - logits.maxCoeff()).exp();
    return e / e.sum();
}

/// Greedy choice: lowest index among tied maxima.
inline int argmax_token(const Eigen::Ref<const Vector>& logits) {
    Index best = 0;
    for (Index i = 1; i < logits.size(); ++i)
        if (logits(i) > logits(best)) best = i;
    return static_cast<int>(best);
}

struct GenerateResult {
    std::vector<int> tokens;
    std::vector<Edit> applied;  // every dynamic edit, with its absolute position
};

/// Greedy decoding for `steps` tokens. At each step the provider is consulted once per listed
/// head at the newest position; edits chosen at earlier steps are replayed at their positions,
/// as a key/value cache would hold them.
inline GenerateResult generate(const ToyModel& model, const TokenSequence& seq, int steps,
                               const EditProvider* provider = nullptr) {
    require(steps >= 1, "steps must be positive");
    TokenSequence cur = seq;
    GenerateResult out;
    for (int s = 0; s < steps; ++s) {
        ForwardOptions opt;
        opt.step = s;
        opt.edits = out.applied;
        EditProvider wrapped;
        const int pos = static_cast<int>(cur.final_position());
        if (provider) {
            wrapped.heads = provider->heads;
            wrapped.edit = [&](std::size_t b, const HookRecord& rec) {
                Vector delta = provider->edit(b, rec);
                if (delta.size() == model.config().head_dim) out.applied.push_back({pos, rec.layer, rec.head, delta});
                return delta;
            };
            opt.provider = &wrapped;
        }
        const auto res = forward(model, cur, opt);
        if (!res.logits.allFinite()) throw RuntimeError("non-finite logits during generation");
        const int tok = argmax_token(res.logits);
        out.tokens.push_back(tok);
        cur.generated.push_back(tok);
    }
    return out;
}

/// Position used for activation extraction: -1 is the final position (where the answer is
/// predicted); other negative values count from the end, non-negative values are absolute.
struct PositionRule {
    int position = -1;
};

inline ActivationTensor collect_activations(const ToyModel& model, const std::vector<TokenSequence>& dataset,
                                            PositionRule rule = {}, Manifold label = Manifold::trusted) {
    require(!dataset.empty(), "empty dataset");
    const auto& c = model.config();
    const TensorDims dims{dataset.size(), std::size_t(c.layers), std::size_t(c.heads), std::size_t(c.head_dim)};
    auto tensor = ActivationTensor::zeros(dims, label);
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < dataset.size();) {
        // Equal-length runs form a batch.
        std::size_t end = start + 1;
        while (end < dataset.size() && end - start < kChunk && dataset[end].length() == dataset[start].length()) ++end;
        std::vector<const TokenSequence*> batch;
        for (std::size_t i = start; i < end; ++i) batch.push_back(&dataset[i]);
        ForwardOptions opt;
        opt.record_position = rule.position;
        const auto out = forward_batch(model, batch, opt);
        for (std::size_t i = 0; i < batch.size(); ++i)
            for (const auto& r : out.records[i])
                tensor.set_vector(start + i, std::size_t(r.layer), std::size_t(r.head), r.z);
        start = end;
    }
    return tensor;
}

// ---------------------------------------------------------------------------------------------
// Training: next-token cross-entropy on (prompt -> answer -> EOS), Adam, hand-written backprop.

struct TrainExample {
    TokenSequence prompt;
    int answer = vocab::kNo;
};

struct TrainConfig {
    int steps = 200;
    int batch = 32;
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;  // global gradient-norm clip
    std::uint64_t seed = 0;

    Json to_json() const {
        return Json{{"steps", steps}, {"batch", batch},       {"lr", lr},
                    {"beta1", beta1}, {"beta2", beta2},     {"adam_eps", adam_eps},
                    {"clip_norm", clip_norm}};
    }

    /// Schedule fields only; the seed comes from the run.
    static TrainConfig from_json(const Json& j) {
        TrainConfig c;
        c.steps = j.value("steps", c.steps);
        c.batch = j.value("batch", c.batch);
        c.lr = j.value("lr", c.lr);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.adam_eps = j.value("adam_eps", c.adam_eps);
        c.clip_norm = j.value("clip_norm", c.clip_norm);
        require(c.steps >= 0 && c.batch >= 1, "invalid training schedule");
        require(c.lr > 0 && c.clip_norm > 0, "lr and clip_norm must be positive");
        return c;
    }
};

struct TrainReport {
    std::vector<double> loss;  // mean minibatch loss per step
    double final_accuracy = 0.0;  // answer accuracy on the full training set
};

namespace detail {

/// Mean over examples of CE(answer at final prompt position) + CE(EOS after the answer).
/// Fills grad (same shapes as p) when non-null.
template <class S>
S train_loss(const Params<S>& p, const ModelConfig& c, const std::vector<const TrainExample*>& batch,
             Params<S>* grad) {
    using M = typename Params<S>::M;
    const Index bsz = static_cast<Index>(batch.size());
    std::vector<TokenSequence> seqs;
    seqs.reserve(batch.size());
    for (const auto* e : batch) {
        TokenSequence s = e->prompt;
        s.generated.push_back(e->answer);
        check_sequence(c, s);
        seqs.push_back(std::move(s));
    }
    const Index len = seqs.front().length();
    for (const auto& s : seqs) require(s.length() == len, "batch sequences differ in length");
    const Index dim = c.model_dim();
    M x(bsz * len, dim);
    for (Index b = 0; b < bsz; ++b) embed(p, seqs[static_cast<std::size_t>(b)], x, b * len);

    std::vector<LayerCache<S>> caches(static_cast<std::size_t>(c.layers));
    for (int l = 0; l < c.layers; ++l) {
        const RowMatrix<S> z = attend<S>(p, c, l, x, bsz, len, grad ? &caches[static_cast<std::size_t>(l)] : nullptr);
        x.noalias() += z * p.wo[static_cast<std::size_t>(l)];
    }
    // Rows: (b, len-2) -> answer, (b, len-1) -> EOS.
    M h(2 * bsz, dim);
    std::vector<int> target(static_cast<std::size_t>(2 * bsz));
    for (Index b = 0; b < bsz; ++b) {
        h.row(2 * b) = x.row(b * len + len - 2);
        h.row(2 * b + 1) = x.row(b * len + len - 1);
        target[static_cast<std::size_t>(2 * b)] = batch[static_cast<std::size_t>(b)]->answer;
        target[static_cast<std::size_t>(2 * b + 1)] = vocab::kEos;
    }
    M logits = h * p.out_w;
    logits.rowwise() += p.out_b.row(0);
    S loss = 0;
    M dlogits(logits.rows(), logits.cols());
    for (Index r = 0; r < logits.rows(); ++r) {
        const S m = logits.row(r).maxCoeff();
        const auto e = (logits.row(r).array() - m).exp();
        const S sum = e.sum();
        loss += std::log(sum) + m - logits(r, target[static_cast<std::size_t>(r)]);
        dlogits.row(r) = e / sum;
        dlogits(r, target[static_cast<std::size_t>(r)]) -= 1;
    }
    const S inv = S(1) / S(bsz);
    loss *= inv;
    if (!grad) return loss;

    dlogits *= inv;
    *grad = Params<S>::zeros(c);
    grad->out_w.noalias() = h.transpose() * dlogits;
    grad->out_b = dlogits.colwise().sum();
    const M dh = dlogits * p.out_w.transpose();
    M dx = M::Zero(bsz * len, dim);
    for (Index b = 0; b < bsz; ++b) {
        dx.row(b * len + len - 2) = dh.row(2 * b);
        dx.row(b * len + len - 1) = dh.row(2 * b + 1);
    }

    const Index d = c.head_dim;
    const S scale = S(1) / std::sqrt(S(d));
    for (int l = c.layers - 1; l >= 0; --l) {
        const auto li = static_cast<std::size_t>(l);
        auto& cache = caches[li];
        grad->wo[li].noalias() = cache.z.transpose() * dx;
        const RowMatrix<S> dz = dx * p.wo[li].transpose();
        RowMatrix<S> dq = RowMatrix<S>::Zero(bsz * len, dim);
        RowMatrix<S> dk = RowMatrix<S>::Zero(bsz * len, dim);
        RowMatrix<S> dv = RowMatrix<S>::Zero(bsz * len, dim);
        if (d == 16)
            attention_backward<S, 16>(cache, dz, dq, dk, dv, bsz, c.heads, len, d, scale);
        else
            attention_backward<S, 0>(cache, dz, dq, dk, dv, bsz, c.heads, len, d, scale);
        grad->wq[li].noalias() = cache.x.transpose() * dq;
        grad->wk[li].noalias() = cache.x.transpose() * dk;
        grad->wv[li].noalias() = cache.x.transpose() * dv;
        dx.noalias() += dq * p.wq[li].transpose();
        dx.noalias() += dk * p.wk[li].transpose();
        dx.noalias() += dv * p.wv[li].transpose();
    }

    for (Index b = 0; b < bsz; ++b) {
        const auto& s = seqs[static_cast<std::size_t>(b)];
        Index t = 0;
        for (int tok : s.text) grad->token.row(tok) += dx.row(b * len + t++);
        for (Index i = 0; i < s.visual.rows(); ++i, ++t) {
            grad->visual_w.noalias() += s.visual.row(i).transpose().template cast<S>() * dx.row(b * len + t);
            grad->visual_b += dx.row(b * len + t);
        }
        grad->visual_end += dx.row(b * len + t++);
        for (int tok : s.generated) grad->token.row(tok) += dx.row(b * len + t++);
        grad->position.topRows(len) += dx.middleRows(b * len, len);
    }
    return loss;
}

}  // namespace detail

/// Answer accuracy (greedy token at the final prompt position) over a set of examples.
inline double answer_accuracy(const ToyModel& model, const std::vector<TrainExample>& data) {
    if (data.empty()) return 0.0;
    std::size_t correct = 0;
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < data.size(); start += kChunk) {
        std::vector<const TokenSequence*> batch;
        for (std::size_t i = start; i < std::min(data.size(), start + kChunk); ++i) batch.push_back(&data[i].prompt);
        const auto out = forward_batch(model, batch);
        for (std::size_t i = 0; i < batch.size(); ++i)
            correct += argmax_token(out.logits.row(Index(i)).transpose()) == data[start + i].answer;
    }
    return double(correct) / double(data.size());
}

/// Trains in f32 with Adam on seeded minibatches; the result is stored back as f32-valued doubles.
inline TrainReport train(ToyModel& model, const std::vector<TrainExample>& data, const TrainConfig& cfg) {
    require(!data.empty(), "empty training set");
    require(cfg.steps >= 0 && cfg.batch >= 1, "invalid training schedule");
    const auto& c = model.config();
    using P = Params<float>;
    P p = model.params().cast<float>();
    P m1 = P::zeros(c), m2 = P::zeros(c), g;
    std::vector<P::M*> pp, pm1, pm2, pg;
    p.visit([&](const std::string&, P::M& x) { pp.push_back(&x); });
    m1.visit([&](const std::string&, P::M& x) { pm1.push_back(&x); });
    m2.visit([&](const std::string&, P::M& x) { pm2.push_back(&x); });

    Rng rng(derive_seed(cfg.seed, 0x7a11));
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size();
    TrainReport report;
    const auto b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
    for (int step = 1; step <= cfg.steps; ++step) {
        std::vector<const TrainExample*> batch;
        while (batch.size() < std::min<std::size_t>(std::size_t(cfg.batch), data.size())) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(&data[order[cursor++]]);
        }
        const float loss = detail::train_loss<float>(p, c, batch, &g);
        if (!std::isfinite(loss)) throw RuntimeError("training diverged (non-finite loss)");
        report.loss.push_back(loss);
        pg.clear();
        g.visit([&](const std::string&, P::M& x) { pg.push_back(&x); });
        double sq = 0.0;
        for (const auto* x : pg) sq += double(x->squaredNorm());
        const double norm = std::sqrt(sq);
        const float clip = norm > cfg.clip_norm ? float(cfg.clip_norm / norm) : 1.0f;
        const float c1 = 1.0f - std::pow(b1, float(step));
        const float c2 = 1.0f - std::pow(b2, float(step));
        // Linear decay to 10% of the base rate.
        const float lr = static_cast<float>(cfg.lr * (1.0 - 0.9 * double(step - 1) / double(cfg.steps)));
        for (std::size_t i = 0; i < pp.size(); ++i) {
            *pm1[i] = b1 * *pm1[i] + (1.0f - b1) * clip * *pg[i];
            *pm2[i] = b2 * *pm2[i] + (1.0f - b2) * (clip * clip) * pg[i]->cwiseAbs2();
            pp[i]->array() -= lr * (pm1[i]->array() / c1) /
                              ((pm2[i]->array() / c2).sqrt() + static_cast<float>(cfg.adam_eps));
        }
    }
    model.set_params(p.cast<double>());
    report.final_accuracy = answer_accuracy(model, data);
    return report;
}

// ---------------------------------------------------------------------------------------------
// Checkpoint: magic "SCLM", u32 version, u64 manifest length, JSON manifest, f32 payload.

inline constexpr std::array<char, 4> kModelMagic = {'S', 'C', 'L', 'M'};

inline void save_model(const ToyModel& model, const std::filesystem::path& path) {
    Json tensors = Json::array();
    std::vector<float> payload;
    model.params().visit([&](const std::string& name, const Matrix& m) {
        tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", payload.size()}});
        for (Index i = 0; i < m.rows(); ++i)
            for (Index j = 0; j < m.cols(); ++j) payload.push_back(static_cast<float>(m(i, j)));
    });
    const Json manifest{{"schema_version", kSchemaVersion},
                        {"config", model.config().to_json()},
                        {"seed", model.seed()},
                        {"tensors", tensors}};
    const std::string text = manifest.dump();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw RuntimeError("cannot open '" + path.string() + "' for writing");
    os.write(kModelMagic.data(), kModelMagic.size());
    detail::put<std::uint32_t>(os, 1);
    detail::put<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * 4));
    if (!os) throw RuntimeError("write failed for '" + path.string() + "'");
}

inline ToyModel load_model(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    if (bytes.size() < 16 || bytes.compare(0, 4, std::string(kModelMagic.data(), 4)) != 0)
        throw ValidationError("not a model checkpoint: " + path.string());
    std::uint32_t version = 0;
    std::uint64_t mlen = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&mlen, bytes.data() + 8, 8);
    if (version != 1) throw ValidationError("unsupported checkpoint version: " + path.string());
    if (bytes.size() < 16 + mlen) throw ValidationError("truncated checkpoint: " + path.string());
    Json manifest;
    try {
        manifest = Json::parse(bytes.substr(16, mlen));
    } catch (const Json::exception& e) {
        throw ValidationError("bad checkpoint manifest: " + std::string(e.what()));
    }
    check_schema(manifest, "model checkpoint");
    const auto cfg = ModelConfig::from_json(manifest.at("config"));
    auto params = Params<double>::zeros(cfg);
    const std::size_t base = 16 + mlen;
    std::map<std::string, Json> index;
    for (const auto& t : manifest.at("tensors")) index[t.at("name").get<std::string>()] = t;
    params.visit([&](const std::string& name, Matrix& m) {
        const auto it = index.find(name);
        if (it == index.end()) throw ValidationError("checkpoint lacks tensor " + name);
        if (it->second.at("rows").get<Index>() != m.rows() || it->second.at("cols").get<Index>() != m.cols())
            throw ValidationError("checkpoint tensor shape mismatch: " + name);
        const std::size_t off = base + 4 * it->second.at("offset").get<std::size_t>();
        if (bytes.size() < off + 4 * std::size_t(m.size())) throw ValidationError("truncated checkpoint: " + path.string());
        for (Index i = 0; i < m.rows(); ++i)
            for (Index j = 0; j < m.cols(); ++j) {
                float v;
                std::memcpy(&v, bytes.data() + off + 4 * std::size_t(i * m.cols() + j), 4);
                m(i, j) = v;
            }
    });
    return ToyModel(cfg, manifest.at("seed").get<std::uint64_t>(), std::move(params));
}

}  // namespace scalpel
