#include "reflex/denoiser.hpp"

#include "json.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <future>
#include <map>
#include <mutex>
#include <numbers>
#include <numeric>
#include <sstream>

namespace reflex {

using json = nlohmann::json;

std::string_view to_string(Parameterization p) { return p == Parameterization::epsilon ? "epsilon" : "sample"; }

Parameterization parse_parameterization(std::string_view name) {
    if (name == "epsilon") return Parameterization::epsilon;
    if (name == "sample") return Parameterization::sample;
    throw InvalidArgument("unknown parameterization '" + std::string(name) + "'");
}

std::string_view to_string(Optimizer o) { return o == Optimizer::momentum ? "momentum" : "adam"; }

Optimizer parse_optimizer(std::string_view name) {
    if (name == "momentum") return Optimizer::momentum;
    if (name == "adam") return Optimizer::adam;
    throw InvalidArgument("unknown optimizer '" + std::string(name) + "'");
}

template <class T>
VectorX<T> time_features(int t, int count) {
    const int half = count / 2;
    VectorX<T> out(count);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(1000.0) * i / half);
        out[i] = static_cast<T>(std::sin(t * freq));
        out[half + i] = static_cast<T>(std::cos(t * freq));
    }
    return out;
}

// ---------------------------------------------------------------- params

template <class T>
std::pair<int, int> DenoiserParams<T>::tensor_shape(const DenoiserShape& s, int index) {
    const int d = s.d_model;
    switch (index) {
        case time_w: return {d, s.time_features};
        case cond_w: return {d, s.cond_dim};
        case state_w: return {d, s.state_dim()};
        case hidden1_w:
        case hidden2_w: return {d, d};
        case out_w: return {s.state_dim(), d};
        case out_b: return {s.state_dim(), 1};
        default: return {d, 1};
    }
}

template <class T>
DenoiserParams<T> DenoiserParams<T>::zeros(const DenoiserShape& s) {
    DenoiserParams p;
    p.shape = s;
    for (int i = 0; i < count; ++i) {
        const auto [r, c] = tensor_shape(s, i);
        p[i] = MatrixX<T>::Zero(r, c);
    }
    return p;
}

template <class T>
Eigen::Index DenoiserParams<T>::size() const {
    Eigen::Index n = 0;
    for (const auto& m : tensors) n += m.size();
    return n;
}

template <class T>
bool DenoiserParams<T>::all_finite() const {
    return std::all_of(tensors.begin(), tensors.end(), [](const MatrixX<T>& m) { return m.allFinite(); });
}

template <class T>
void DenoiserParams<T>::set_zero() {
    for (auto& m : tensors) m.setZero();
}

template <class T>
T& DenoiserParams<T>::entry(Eigen::Index flat) {
    for (auto& m : tensors) {
        if (flat < m.size()) return m.data()[flat];
        flat -= m.size();
    }
    throw InvalidArgument("parameter index out of range");
}

template <class T>
T DenoiserParams<T>::entry(Eigen::Index flat) const {
    return const_cast<DenoiserParams*>(this)->entry(flat);
}

template <class T>
std::pair<std::string, Eigen::Index> DenoiserParams<T>::locate(Eigen::Index flat) const {
    for (int i = 0; i < count; ++i) {
        if (flat < (*this)[i].size()) return {kNames[static_cast<std::size_t>(i)], flat};
        flat -= (*this)[i].size();
    }
    throw InvalidArgument("parameter index out of range");
}

template <class T>
DenoiserParams<T> init_params(const DenoiserShape& shape, std::uint64_t seed) {
    if (shape.d_model < 8) throw InvalidArgument("init_params: d_model must be at least 8");
    if (shape.time_features < 2 || shape.time_features % 2 != 0)
        throw InvalidArgument("init_params: time_features must be even");
    auto p = DenoiserParams<T>::zeros(shape);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int i = 0; i < DenoiserParams<T>::count; i += 2) {
        auto& w = p[i];
        const double stddev = 1.0 / std::sqrt(static_cast<double>(w.cols()));
        for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = static_cast<T>(stddev * normal(rng));
    }
    return p;
}

// ---------------------------------------------------------------- network

namespace {

template <class T>
auto silu(const MatrixX<T>& h) {
    return (h.array() / (T(1) + (-h.array()).exp())).matrix();
}

/// W * X; per-column products for tiny batches, where GEMM packing dominates.
template <class T>
MatrixX<T> mul(const MatrixX<T>& w, const MatrixX<T>& x) {
    if (x.cols() > 4) return w * x;
    MatrixX<T> out(w.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) out.col(j).noalias() = w * x.col(j);
    return out;
}

template <class T>
MatrixX<T> silu_grad(const MatrixX<T>& h) {
    const auto s = (T(1) / (T(1) + (-h.array()).exp()));
    return (s * (T(1) + h.array() * (T(1) - s))).matrix();
}

}  // namespace

template <class T>
MatrixX<T> network_forward(const DenoiserParams<T>& p, const MatrixX<T>& x, std::span<const int> t,
                           const MatrixX<T>& c, ForwardCache<T>* cache) {
    using P = DenoiserParams<T>;
    const Eigen::Index B = x.cols();
    if (x.rows() != p.shape.state_dim() || c.rows() != p.shape.cond_dim || c.cols() != B ||
        static_cast<Eigen::Index>(t.size()) != B)
        throw InvalidArgument("network_forward: batch shape mismatch");

    MatrixX<T> phi(p.shape.time_features, B);
    for (Eigen::Index j = 0; j < B; ++j) phi.col(j) = time_features<T>(t[static_cast<std::size_t>(j)], p.shape.time_features);

    const VectorX<T> bias0 = p[P::time_b] + p[P::cond_b] + p[P::state_b];
    MatrixX<T> h0 = mul(p[P::state_w], x);
    h0 += mul(p[P::time_w], phi);
    h0 += mul(p[P::cond_w], c);
    h0.colwise() += bias0;
    MatrixX<T> a0 = silu<T>(h0);

    MatrixX<T> h1 = mul(p[P::hidden1_w], a0);
    h1.colwise() += VectorX<T>(p[P::hidden1_b]);
    MatrixX<T> a1 = silu<T>(h1);

    MatrixX<T> h2 = mul(p[P::hidden2_w], a1);
    h2.colwise() += VectorX<T>(p[P::hidden2_b]);
    MatrixX<T> a2 = silu<T>(h2) + a1;

    MatrixX<T> out = mul(p[P::out_w], a2);
    out.colwise() += VectorX<T>(p[P::out_b]);

    if (cache) {
        cache->x = x;
        cache->phi = std::move(phi);
        cache->c = c;
        cache->h0 = std::move(h0);
        cache->a0 = std::move(a0);
        cache->h1 = std::move(h1);
        cache->a1 = std::move(a1);
        cache->h2 = std::move(h2);
        cache->a2 = std::move(a2);
    }
    return out;
}

template <class T>
void network_backward(const DenoiserParams<T>& p, const ForwardCache<T>& k, const MatrixX<T>& d_out,
                      DenoiserParams<T>& g) {
    using P = DenoiserParams<T>;
    g[P::out_w].noalias() += d_out * k.a2.transpose();
    g[P::out_b] += d_out.rowwise().sum();

    const MatrixX<T> d_a2 = p[P::out_w].transpose() * d_out;
    const MatrixX<T> d_h2 = d_a2.cwiseProduct(silu_grad<T>(k.h2));
    g[P::hidden2_w].noalias() += d_h2 * k.a1.transpose();
    g[P::hidden2_b] += d_h2.rowwise().sum();

    MatrixX<T> d_a1 = d_a2;
    d_a1.noalias() += p[P::hidden2_w].transpose() * d_h2;
    const MatrixX<T> d_h1 = d_a1.cwiseProduct(silu_grad<T>(k.h1));
    g[P::hidden1_w].noalias() += d_h1 * k.a0.transpose();
    g[P::hidden1_b] += d_h1.rowwise().sum();

    const MatrixX<T> d_a0 = p[P::hidden1_w].transpose() * d_h1;
    const MatrixX<T> d_h0 = d_a0.cwiseProduct(silu_grad<T>(k.h0));
    const VectorX<T> d_b0 = d_h0.rowwise().sum();
    g[P::state_w].noalias() += d_h0 * k.x.transpose();
    g[P::time_w].noalias() += d_h0 * k.phi.transpose();
    g[P::cond_w].noalias() += d_h0 * k.c.transpose();
    g[P::state_b] += d_b0;
    g[P::time_b] += d_b0;
    g[P::cond_b] += d_b0;
}

template <class T>
MatrixX<T> noise_from_head(const MatrixX<T>& head, const MatrixX<T>& x_t, std::span<const int> t, Parameterization p,
                           const NoiseSchedule& schedule) {
    if (p == Parameterization::epsilon) return head;
    MatrixX<T> out(head.rows(), head.cols());
    for (Eigen::Index j = 0; j < head.cols(); ++j) {
        const int tj = t[static_cast<std::size_t>(j)];
        const T sa = static_cast<T>(std::sqrt(schedule.alpha_bar_at(tj)));
        const T inv = static_cast<T>(1.0 / std::sqrt(1.0 - schedule.alpha_bar_at(tj)));
        out.col(j) = (x_t.col(j) - sa * head.col(j)) * inv;
    }
    return out;
}

double DenoiserSpec::loss_weight(const NoiseSchedule& s, int t) const {
    if (snr_clip <= 0.0) return 1.0;
    const double ab = s.alpha_bar_at(t);
    return std::min(1.0, snr_clip * (1.0 - ab) / ab);
}

template <class T>
std::vector<double> epsilon_loss(const MatrixX<T>& predicted, const MatrixX<T>& eps) {
    if (predicted.rows() != eps.rows() || predicted.cols() != eps.cols())
        throw InvalidArgument("epsilon_loss: shape mismatch");
    std::vector<double> out(static_cast<std::size_t>(eps.cols()));
    for (Eigen::Index j = 0; j < eps.cols(); ++j)
        out[static_cast<std::size_t>(j)] = (predicted.col(j) - eps.col(j)).template cast<double>().squaredNorm();
    return out;
}

namespace {

constexpr Eigen::Index kChunk = 32;

template <class T>
struct ChunkResult {
    std::vector<double> item_loss;
    DenoiserParams<T> grad;
};

template <class T>
ChunkResult<T> chunk_loss_and_grads(const DenoiserParams<T>& params, const DenoiserSpec& spec,
                                    const NoiseSchedule& schedule, const TrainBatch<T>& batch, Eigen::Index begin,
                                    Eigen::Index n, Eigen::Index total) {
    const std::span<const int> t(batch.t.data() + begin, static_cast<std::size_t>(n));
    MatrixX<T> x_t(batch.x0.rows(), n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const double ab = schedule.alpha_bar_at(t[static_cast<std::size_t>(j)]);
        x_t.col(j) = static_cast<T>(std::sqrt(ab)) * batch.x0.col(begin + j) +
                     static_cast<T>(std::sqrt(1.0 - ab)) * batch.eps.col(begin + j);
    }
    const MatrixX<T> cond = batch.cond.middleCols(begin, n);

    ForwardCache<T> cache;
    const MatrixX<T> head = network_forward(params, x_t, t, cond, &cache);
    const MatrixX<T> eps_hat = noise_from_head(head, x_t, t, spec.parameterization, schedule);
    const MatrixX<T> resid = eps_hat - batch.eps.middleCols(begin, n);

    ChunkResult<T> out;
    out.item_loss = epsilon_loss<T>(eps_hat, batch.eps.middleCols(begin, n));
    MatrixX<T> d_head = resid * static_cast<T>(2.0 / static_cast<double>(total));
    for (Eigen::Index j = 0; j < n; ++j) {
        const int tj = t[static_cast<std::size_t>(j)];
        const double w = spec.loss_weight(schedule, tj);
        out.item_loss[static_cast<std::size_t>(j)] *= w;
        double g = w;
        if (spec.parameterization == Parameterization::sample) {
            const double ab = schedule.alpha_bar_at(tj);
            g *= -std::sqrt(ab) / std::sqrt(1.0 - ab);
        }
        d_head.col(j) *= static_cast<T>(g);
    }
    out.grad = DenoiserParams<T>::zeros(params.shape);
    network_backward(params, cache, d_head, out.grad);
    return out;
}

}  // namespace

template <class T>
LossAndGrad<T> loss_and_grads(const DenoiserParams<T>& params, const DenoiserSpec& spec,
                              const NoiseSchedule& schedule, const TrainBatch<T>& batch, int workers) {
    const Eigen::Index B = batch.size();
    if (B == 0) throw InvalidArgument("loss_and_grads: empty batch");
    if (batch.eps.cols() != B || batch.cond.cols() != B || static_cast<Eigen::Index>(batch.t.size()) != B)
        throw InvalidArgument("loss_and_grads: batch fields disagree in size");
    for (int ti : batch.t) schedule.check_index(ti);

    const Eigen::Index chunks = (B + kChunk - 1) / kChunk;
    std::vector<ChunkResult<T>> results(static_cast<std::size_t>(chunks));
    auto run = [&](Eigen::Index ci) {
        const Eigen::Index begin = ci * kChunk;
        results[static_cast<std::size_t>(ci)] =
            chunk_loss_and_grads(params, spec, schedule, batch, begin, std::min(kChunk, B - begin), B);
    };
    if (workers <= 1 || chunks == 1) {
        for (Eigen::Index ci = 0; ci < chunks; ++ci) run(ci);
    } else {
        std::vector<std::future<void>> jobs;
        std::atomic<Eigen::Index> next{0};
        const int n_threads = static_cast<int>(std::min<Eigen::Index>(workers, chunks));
        for (int w = 0; w < n_threads; ++w)
            jobs.push_back(std::async(std::launch::async, [&] {
                for (Eigen::Index ci = next++; ci < chunks; ci = next++) run(ci);
            }));
        for (auto& j : jobs) j.get();
    }

    LossAndGrad<T> out;
    out.grad = std::move(results[0].grad);
    out.item_loss = std::move(results[0].item_loss);
    for (std::size_t ci = 1; ci < results.size(); ++ci) {
        for (int i = 0; i < DenoiserParams<T>::count; ++i) out.grad[i] += results[ci].grad[i];
        out.item_loss.insert(out.item_loss.end(), results[ci].item_loss.begin(), results[ci].item_loss.end());
    }
    for (std::size_t i = 0; i < out.item_loss.size(); ++i) {
        if (!std::isfinite(out.item_loss[i]))
            throw NumericalError("non-finite loss at batch index " + std::to_string(i));
        out.loss += out.item_loss[i];
    }
    out.loss /= static_cast<double>(B);
    return out;
}

// ---------------------------------------------------------------- gradient check

double relative_error(double a, double b) {
    const double denom = std::max(std::abs(a), std::abs(b));
    return denom == 0.0 ? 0.0 : std::abs(a - b) / denom;
}

GradCheckReport grad_check(const DenoiserParams<double>& params, const LossFunction& loss,
                           const DenoiserParams<double>& analytic, int probes, std::uint64_t seed, double step,
                           std::vector<Eigen::Index> forced) {
    if (probes < 0 || step <= 0.0) throw InvalidArgument("grad_check: bad probe count or step");
    const Eigen::Index n = params.size();
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    std::vector<Eigen::Index> indices = std::move(forced);
    for (int i = 0; i < probes; ++i) indices.push_back(pick(rng));

    GradCheckReport report;
    DenoiserParams<double> work = params;
    for (Eigen::Index idx : indices) {
        double& w = work.entry(idx);
        const double saved = w;
        w = saved + step;
        const double up = loss(work);
        w = saved - step;
        const double down = loss(work);
        w = saved;

        GradProbe probe;
        probe.index = idx;
        std::tie(probe.tensor, probe.local) = params.locate(idx);
        probe.analytic = analytic.entry(idx);
        probe.numeric = (up - down) / (2.0 * step);
        probe.rel_error = relative_error(probe.analytic, probe.numeric);
        if (report.probes.empty() || probe.rel_error > report.max_rel_error) {
            report.max_rel_error = probe.rel_error;
            report.worst = probe;
        }
        report.probes.push_back(std::move(probe));
    }
    return report;
}

GradCheckReport grad_check(const DenoiserParams<double>& params, const DenoiserSpec& spec, int probes,
                           std::uint64_t seed, int batch_size) {
    const NoiseSchedule schedule = spec.schedule();
    std::mt19937_64 rng(mix_seed(seed, 7));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<int> pick_t(1, schedule.T);
    TrainBatch<double> batch;
    const int D = spec.shape.state_dim();
    batch.x0 = MatrixX<double>::NullaryExpr(D, batch_size, [&] { return normal(rng); });
    batch.eps = MatrixX<double>::NullaryExpr(D, batch_size, [&] { return normal(rng); });
    batch.cond = MatrixX<double>::NullaryExpr(spec.shape.cond_dim, batch_size, [&] { return normal(rng); });
    for (int i = 0; i < batch_size; ++i) batch.t.push_back(pick_t(rng));

    const auto analytic = loss_and_grads(params, spec, schedule, batch);
    const LossFunction loss = [&](const DenoiserParams<double>& p) {
        return loss_and_grads(p, spec, schedule, batch).loss;
    };
    return grad_check(params, loss, analytic.grad, probes, mix_seed(seed, 8));
}

// ---------------------------------------------------------------- normalizer

const Eigen::MatrixXd& dct_matrix(int n) {
    static std::mutex mutex;
    static std::map<int, Eigen::MatrixXd> cache;
    if (n < 1) throw InvalidArgument("dct_matrix: n must be positive");
    std::lock_guard lock(mutex);
    auto it = cache.find(n);
    if (it == cache.end()) {
        Eigen::MatrixXd d(n, n);
        for (int j = 0; j < n; ++j) {
            const double w = std::sqrt((j == 0 ? 1.0 : 2.0) / n);
            for (int k = 0; k < n; ++k) d(j, k) = w * std::cos(std::numbers::pi * (k + 0.5) * j / n);
        }
        it = cache.emplace(n, std::move(d)).first;
    }
    return it->second;
}

namespace {

/// Per-row (steps x channels) view of a row-major trajectory row.
using RowBlock = Eigen::Matrix<double, Eigen::Dynamic, kChannels, Eigen::RowMajor>;

RowBlock row_block(const RowMatrixX<double>& m, int r, int steps) {
    RowBlock b(steps, kChannels);
    for (int k = 0; k < steps; ++k)
        for (int c = 0; c < kChannels; ++c) b(k, c) = m(r, k * kChannels + c);
    return b;
}

}  // namespace

Normalizer Normalizer::identity(int agents, int steps) {
    Normalizer n;
    n.mean = Eigen::MatrixXd::Zero(agents, steps * kChannels);
    n.scale = Eigen::MatrixXd::Ones(agents, steps * kChannels);
    return n;
}

Normalizer Normalizer::fit(const std::vector<Trajectory>& data, int agents, double relative_floor, bool spectral,
                           double min_scale) {
    if (data.empty()) throw InvalidArgument("Normalizer::fit: no data");
    if (!(min_scale > 0.0)) throw InvalidArgument("Normalizer::fit: min_scale must be positive");
    if (!(relative_floor >= 0.0 && relative_floor < 1.0)) throw InvalidArgument("Normalizer::fit: relative_floor must lie in [0, 1)");
    const int steps = data.front().steps();
    const int width = steps * kChannels;
    Normalizer n = identity(agents, steps);
    n.spectral = spectral;
    for (const auto& tr : data) {
        if (tr.agents() != agents || tr.steps() != steps) throw InvalidArgument("Normalizer::fit: shape mismatch");
        for (int r = 0; r < agents; ++r) n.mean.row(r) += tr.data().row(r);
    }
    const double count = static_cast<double>(data.size());
    n.mean /= count;
    Eigen::MatrixXd sq = Eigen::MatrixXd::Zero(agents, width);
    for (const auto& tr : data) {
        Trajectory centred(agents, steps);
        centred.data() = tr.data() - n.mean;
        Eigen::VectorXd z = n.direction_to_model(centred);
        sq += Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(z.data(), agents, width)
                  .cwiseAbs2();
    }
    n.scale = (sq / count).cwiseSqrt().cwiseMax(min_scale);
    for (int r = 0; r < agents; ++r)
        for (int c = 0; c < kChannels; ++c) {
            double top = 0.0;
            for (int k = 0; k < steps; ++k) top = std::max(top, n.scale(r, k * kChannels + c));
            for (int k = 0; k < steps; ++k)
                n.scale(r, k * kChannels + c) = std::max(n.scale(r, k * kChannels + c), relative_floor * top);
        }
    return n;
}

Eigen::VectorXd Normalizer::to_model(const Trajectory& traj) const {
    if (traj.agents() != agents() || traj.steps() != steps()) throw InvalidArgument("Normalizer: shape mismatch");
    Trajectory centred(agents(), steps());
    centred.data() = traj.data() - mean;
    return direction_to_model(centred);
}

Trajectory Normalizer::from_model(const Eigen::VectorXd& x) const {
    Trajectory out = direction_from_model(x);
    out.data() += mean;
    return out;
}

Trajectory Normalizer::direction_from_model(const Eigen::VectorXd& d) const {
    const int n = steps();
    if (d.size() != agents() * n * kChannels) throw InvalidArgument("Normalizer: vector size mismatch");
    Trajectory out(agents(), n);
    out.flat() = d;
    out.data().array() *= scale.array();
    if (spectral) {
        const Eigen::MatrixXd& D = dct_matrix(n);
        for (int r = 0; r < agents(); ++r) {
            const RowBlock b = D.transpose() * row_block(out.data(), r, n);
            for (int k = 0; k < n; ++k)
                for (int c = 0; c < kChannels; ++c) out.data()(r, k * kChannels + c) = b(k, c);
        }
    }
    return out;
}

Eigen::VectorXd Normalizer::direction_to_model(const Trajectory& d) const {
    const int n = steps();
    if (d.agents() != agents() || d.steps() != n) throw InvalidArgument("Normalizer: shape mismatch");
    Trajectory out = d;
    if (spectral) {
        const Eigen::MatrixXd& D = dct_matrix(n);
        for (int r = 0; r < agents(); ++r) {
            const RowBlock b = D * row_block(d.data(), r, n);
            for (int k = 0; k < n; ++k)
                for (int c = 0; c < kChannels; ++c) out.data()(r, k * kChannels + c) = b(k, c);
        }
    }
    out.data().array() /= scale.array();
    return out.flat();
}

// ---------------------------------------------------------------- inference

Eigen::MatrixXd NoiseModel::predict(const Eigen::MatrixXd& x, int t, const Eigen::MatrixXd& c) const {
    if (x.rows() != state_dim()) throw InvalidArgument("denoiser: x_t has wrong length");
    if (c.rows() != cond_dim() || c.cols() != x.cols()) throw InvalidArgument("denoiser: condition has wrong shape");
    if (!x.allFinite()) throw NumericalError("denoiser: non-finite entry in x_t");
    if (!c.allFinite()) throw NumericalError("denoiser: non-finite entry in condition c");
    evaluations_ += static_cast<std::uint64_t>(x.cols());
    return do_predict(x, t, c);
}

Eigen::VectorXd NoiseModel::predict(const Eigen::VectorXd& x, int t, const Eigen::VectorXd& c) const {
    return predict(Eigen::MatrixXd(x), t, Eigen::MatrixXd(c)).col(0);
}

Denoiser::Denoiser(DenoiserSpec spec, DenoiserParams<float> params, Normalizer normalizer)
    : spec_(std::move(spec)), params_(std::move(params)), normalizer_(std::move(normalizer)),
      schedule_(spec_.schedule()) {
    if (!(params_.shape == spec_.shape)) throw InvalidArgument("Denoiser: parameter shape disagrees with spec");
    if (!params_.all_finite()) throw NumericalError("Denoiser: non-finite parameters");
    if (normalizer_.agents() != spec_.shape.agents || normalizer_.steps() != spec_.shape.steps)
        throw InvalidArgument("Denoiser: normalizer shape disagrees with spec");
}

Eigen::MatrixXd Denoiser::do_predict(const Eigen::MatrixXd& x, int t, const Eigen::MatrixXd& c) const {
    schedule_.check_index(t);
    const std::vector<int> ts(static_cast<std::size_t>(x.cols()), t);
    const MatrixX<float> head = network_forward<float>(params_, x.cast<float>(), ts, c.cast<float>());
    // read-out in double: at small t the sample form divides by sqrt(1 - alpha_bar)
    Eigen::MatrixXd out = noise_from_head<double>(head.cast<double>(), x, ts, spec_.parameterization, schedule_);
    if (!out.allFinite()) throw NumericalError("denoiser: non-finite output");
    return out;
}

// ---------------------------------------------------------------- training

void TrainConfig::validate() const {
    if (!(p_drop >= 0.0 && p_drop <= 1.0)) throw InvalidArgument("train: p_drop must lie in [0, 1]");
    if (batch < 1 || steps < 1) throw InvalidArgument("train: batch and steps must be positive");
    if (!(learning_rate > 0.0) || !(final_lr_ratio >= 0.0 && final_lr_ratio <= 1.0))
        throw InvalidArgument("train: bad learning-rate schedule");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("train: momentum must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw InvalidArgument("train: beta2 must lie in [0, 1)");
    if (!(grad_clip > 0.0)) throw InvalidArgument("train: grad_clip must be positive");
    if (!(spectral_floor >= 0.0 && spectral_floor < 1.0)) throw InvalidArgument("train: spectral_floor must lie in [0, 1)");
    if (workers < 1) throw InvalidArgument("train: workers must be positive");
    if (stop_at < 0) throw InvalidArgument("train: stop_at must be non-negative");
    const NoiseSchedule s = model.schedule();
    if (!(s.alpha_bar_at(s.T) < 0.05))
        throw InvalidArgument("train: schedule leaves alpha_bar_T >= 0.05; x_T would not be close to pure noise");
}

TrainingDiverged::TrainingDiverged(int step_, double loss_, double initial_)
    : NumericalError("training diverged at step " + std::to_string(step_) + ": loss " + std::to_string(loss_) +
                     " exceeds 1e3 x initial " + std::to_string(initial_)),
      step(step_), loss(loss_), initial(initial_) {}

TrainingExample make_example(const Scenario& scenario, int agents) {
    const Trajectory local = transform(scenario.ground_truth, ego_frame(scenario.scene).inverse());
    TrainingExample ex;
    ex.x0 = Trajectory(agents, local.steps(), local.dt());
    const int rows = std::min(agents, local.agents());
    ex.x0.data().topRows(rows) = local.data().topRows(rows);
    ex.conditions = assemble_conditions(scenario.scene);
    return ex;
}

namespace {

double learning_rate_at(const TrainConfig& cfg, int step) {
    const double base = cfg.learning_rate;
    if (step < cfg.warmup_steps) return base * (step + 1) / cfg.warmup_steps;
    const double span = std::max(1, cfg.steps - cfg.warmup_steps);
    const double progress = std::min(1.0, (step - cfg.warmup_steps) / span);
    const double floor = base * cfg.final_lr_ratio;
    return floor + 0.5 * (base - floor) * (1.0 + std::cos(kPi * progress));
}

}  // namespace

TrainResult train(const std::vector<TrainingExample>& data, const TrainConfig& cfg, const TrainProgress& progress,
                  const TrainResume* resume) {
    cfg.validate();
    if (data.empty()) throw InvalidArgument("train: empty dataset");
    const DenoiserShape& shape = cfg.model.shape;
    const NoiseSchedule schedule = cfg.model.schedule();

    std::vector<Trajectory> futures;
    futures.reserve(data.size());
    for (const auto& ex : data) {
        if (ex.x0.agents() != shape.agents || ex.x0.steps() != shape.steps)
            throw InvalidArgument("train: example shape disagrees with the model");
        futures.push_back(ex.x0);
    }
    Normalizer normalizer = Normalizer::fit(futures, shape.agents, cfg.spectral_floor);

    const Eigen::Index N = static_cast<Eigen::Index>(data.size());
    MatrixX<float> x0(shape.state_dim(), N), c_full(shape.cond_dim, N), c_dec(shape.cond_dim, N);
    for (Eigen::Index i = 0; i < N; ++i) {
        const auto& ex = data[static_cast<std::size_t>(i)];
        x0.col(i) = normalizer.to_model(ex.x0).cast<float>();
        c_full.col(i) = ex.conditions.full.cast<float>();
        c_dec.col(i) = ex.conditions.decouple.cast<float>();
    }

    DenoiserParams<float> params = init_params<float>(shape, mix_seed(cfg.seed, 1));
    DenoiserParams<float> velocity = DenoiserParams<float>::zeros(shape);
    DenoiserParams<float> second = DenoiserParams<float>::zeros(shape);
    int start = 0;
    if (resume) {
        if (!(resume->params.shape == shape) || !(resume->velocity.shape == shape))
            throw InvalidArgument("train: resume state shape disagrees with the config");
        params = resume->params;
        velocity = resume->velocity;
        if (cfg.optimizer == Optimizer::adam) {
            if (resume->second_moment.tensors[0].size() == 0 || !(resume->second_moment.shape == shape))
                throw InvalidArgument("train: resume state lacks the second-moment buffer");
            second = resume->second_moment;
        }
        start = resume->start_step;
    }

    TrainResult result{Denoiser(cfg.model, params, normalizer), {}, 0, 0, {}, {}, 0};
    const double inv_dim = 1.0 / shape.state_dim();
    double initial = 0.0;

    const int end = cfg.stop_at > 0 ? std::min(cfg.stop_at, cfg.steps) : cfg.steps;
    if (start > end) throw InvalidArgument("train: resume step lies beyond the final step");
    for (int step = start; step < end; ++step) {
        std::mt19937_64 rng(mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(step)));
        std::uniform_int_distribution<Eigen::Index> pick(0, N - 1);
        std::uniform_int_distribution<int> pick_t(1, schedule.T);
        std::normal_distribution<float> normal(0.0f, 1.0f);
        std::bernoulli_distribution drop(cfg.p_drop);

        TrainBatch<float> batch;
        batch.x0.resize(shape.state_dim(), cfg.batch);
        batch.cond.resize(shape.cond_dim, cfg.batch);
        batch.t.resize(static_cast<std::size_t>(cfg.batch));
        for (int j = 0; j < cfg.batch; ++j) {
            const Eigen::Index i = pick(rng);
            batch.x0.col(j) = x0.col(i);
            const bool dec = drop(rng);
            batch.cond.col(j) = dec ? c_dec.col(i) : c_full.col(i);
            result.draws += 1;
            result.decoupled_draws += dec ? 1 : 0;
            batch.t[static_cast<std::size_t>(j)] = pick_t(rng);
        }
        batch.eps = MatrixX<float>::NullaryExpr(shape.state_dim(), cfg.batch, [&] { return normal(rng); });

        auto lg = loss_and_grads(params, cfg.model, schedule, batch, cfg.workers);
        if (step == start) initial = lg.loss;
        result.loss_curve.push_back(lg.loss);
        if (lg.loss > 1e3 * initial) throw TrainingDiverged(step, lg.loss, initial);

        double sq = 0.0;
        for (auto& g : lg.grad.tensors) {
            g *= static_cast<float>(inv_dim);
            sq += g.template cast<double>().squaredNorm();
        }
        const double norm = std::sqrt(sq);
        const float clip = norm > cfg.grad_clip ? static_cast<float>(cfg.grad_clip / norm) : 1.0f;
        const float lr = static_cast<float>(learning_rate_at(cfg, step));
        const float mu = static_cast<float>(cfg.momentum);
        if (cfg.optimizer == Optimizer::momentum) {
            for (int i = 0; i < DenoiserParams<float>::count; ++i) {
                velocity[i] = mu * velocity[i] + clip * lg.grad[i];
                params[i] -= lr * velocity[i];
            }
        } else {
            const float b2 = static_cast<float>(cfg.beta2);
            const double n = step + 1.0;
            const float c1 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.momentum, n)));
            const float c2 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.beta2, n)));
            for (int i = 0; i < DenoiserParams<float>::count; ++i) {
                const MatrixX<float> g = clip * lg.grad[i];
                velocity[i] = mu * velocity[i] + (1.0f - mu) * g;
                second[i] = b2 * second[i] + (1.0f - b2) * g.cwiseAbs2();
                params[i].array() -= lr * (velocity[i].array() * c1) / ((second[i].array() * c2).sqrt() + 1e-8f);
            }
        }
        if (!params.all_finite()) throw NumericalError("train: non-finite parameters after step " + std::to_string(step));
        if (progress) progress(step, lg.loss);
    }

    result.model = Denoiser(cfg.model, std::move(params), std::move(normalizer));
    result.velocity = std::move(velocity);
    result.second_moment = std::move(second);
    result.next_step = end;
    return result;
}

// ---------------------------------------------------------------- checkpoints

namespace {

void write_floats(std::ostream& os, const MatrixX<float>& m) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
    } else {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const auto bits = byteswap32(std::bit_cast<std::uint32_t>(m.data()[i]));
            os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
        }
    }
}

void read_floats(const char* src, MatrixX<float>& m) {
    std::memcpy(m.data(), src, static_cast<std::size_t>(m.size()) * sizeof(float));
    if constexpr (std::endian::native != std::endian::little) {
        for (Eigen::Index i = 0; i < m.size(); ++i)
            m.data()[i] = std::bit_cast<float>(byteswap32(std::bit_cast<std::uint32_t>(m.data()[i])));
    }
}

json shape_json(const DenoiserShape& s) {
    return {{"agents", s.agents},   {"steps", s.steps},          {"cond_dim", s.cond_dim},
            {"d_model", s.d_model}, {"time_features", s.time_features}};
}

DenoiserShape shape_from_json(const json& j) {
    DenoiserShape s;
    s.agents = j.at("agents").get<int>();
    s.steps = j.at("steps").get<int>();
    s.cond_dim = j.at("cond_dim").get<int>();
    s.d_model = j.at("d_model").get<int>();
    s.time_features = j.at("time_features").get<int>();
    return s;
}

json matrix_json(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
        rows.push_back(row);
    }
    return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j, int rows, int cols, const char* name) {
    if (static_cast<int>(j.size()) != rows) throw InvalidArgument(std::string("checkpoint: normalizer ") + name + " has wrong row count");
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r) {
        const auto& row = j.at(static_cast<std::size_t>(r));
        if (static_cast<int>(row.size()) != cols) throw InvalidArgument(std::string("checkpoint: normalizer ") + name + " has wrong column count");
        for (int c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
    }
    return m;
}

json tensor_table(const DenoiserParams<float>& p) {
    json tensors = json::array();
    for (int i = 0; i < DenoiserParams<float>::count; ++i)
        tensors.push_back({{"name", DenoiserParams<float>::kNames[static_cast<std::size_t>(i)]},
                           {"rows", p[i].rows()},
                           {"cols", p[i].cols()}});
    return tensors;
}

void write_file(const std::filesystem::path& path, const json& header,
                std::initializer_list<const DenoiserParams<float>*> blocks) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << header.dump() << '\n';
    for (const auto* p : blocks)
        for (const auto& m : p->tensors) write_floats(os, m);
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

/// Reads header and payload; checks the tensor table against `shape` and the
/// payload length before touching any output. The payload holds `blocks`
/// consecutive parameter sets sharing one tensor table.
std::pair<json, std::vector<DenoiserParams<float>>> read_file(const std::filesystem::path& path, const char* kind,
                                                              std::optional<DenoiserShape> expected_shape) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw InvalidArgument(path.string() + ": missing header");
    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw InvalidArgument(path.string() + ": malformed header: " + e.what());
    }
    if (header.value("format", "") != kind)
        throw InvalidArgument(path.string() + ": expected format '" + kind + "', found '" + header.value("format", "") + "'");
    const int version = header.value("version", -1);
    if (version != kCheckpointVersion)
        throw InvalidArgument(path.string() + ": version mismatch, expected " + std::to_string(kCheckpointVersion) +
                              ", found " + std::to_string(version));

    const DenoiserShape shape = expected_shape ? *expected_shape : shape_from_json(header.at("shape"));
    const int blocks = header.value("blocks", 1);
    if (blocks < 1 || blocks > 2) throw InvalidArgument(path.string() + ": bad block count");
    const json& table = header.at("tensors");
    if (table.size() != static_cast<std::size_t>(DenoiserParams<float>::count))
        throw InvalidArgument(path.string() + ": expected " + std::to_string(DenoiserParams<float>::count) +
                              " tensors, found " + std::to_string(table.size()));
    std::ostringstream mismatch;
    std::size_t floats = 0;
    for (int i = 0; i < DenoiserParams<float>::count; ++i) {
        const auto& entry = table.at(static_cast<std::size_t>(i));
        const auto [r, c] = DenoiserParams<float>::tensor_shape(shape, i);
        const long fr = entry.at("rows").get<long>(), fc = entry.at("cols").get<long>();
        if (entry.at("name").get<std::string>() != DenoiserParams<float>::kNames[static_cast<std::size_t>(i)] || fr != r ||
            fc != c)
            mismatch << "  " << DenoiserParams<float>::kNames[static_cast<std::size_t>(i)] << ": expected " << r << "x" << c
                     << ", found " << entry.at("name").get<std::string>() << " " << fr << "x" << fc << '\n';
        floats += static_cast<std::size_t>(r) * static_cast<std::size_t>(c);
    }
    if (!mismatch.str().empty())
        throw InvalidArgument(path.string() + ": shape mismatch (d_model " + std::to_string(shape.d_model) + ")\n" +
                              mismatch.str());

    floats *= static_cast<std::size_t>(blocks);
    std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (payload.size() != floats * sizeof(float))
        throw InvalidArgument(path.string() + ": payload holds " + std::to_string(payload.size()) + " bytes, expected " +
                              std::to_string(floats * sizeof(float)));
    std::vector<DenoiserParams<float>> out(static_cast<std::size_t>(blocks), DenoiserParams<float>::zeros(shape));
    const char* src = payload.data();
    for (auto& p : out)
        for (auto& m : p.tensors) {
            read_floats(src, m);
            src += m.size() * static_cast<Eigen::Index>(sizeof(float));
        }
    return {std::move(header), std::move(out)};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Denoiser& model) {
    const auto& spec = model.spec();
    const auto& n = model.normalizer();
    json header = {{"format", "reflex-checkpoint"},
                   {"version", kCheckpointVersion},
                   {"d_model", spec.shape.d_model},
                   {"seed", spec.seed},
                   {"shape", shape_json(spec.shape)},
                   {"parameterization", std::string(to_string(spec.parameterization))},
                   {"snr_clip", spec.snr_clip},
                   {"schedule", {{"T", spec.T}, {"beta_min", spec.beta_min}, {"beta_max", spec.beta_max}}},
                   {"normalizer", {{"spectral", n.spectral}, {"mean", matrix_json(n.mean)}, {"scale", matrix_json(n.scale)}}},
                   {"tensors", tensor_table(model.params())},
                   {"payload_floats", model.params().size()}};
    write_file(path, header, {&model.params()});
}

Denoiser load_checkpoint(const std::filesystem::path& path) {
    std::ifstream probe(path);
    if (!probe) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    std::getline(probe, line);
    json peek;
    try {
        peek = json::parse(line);
    } catch (const json::exception& e) {
        throw InvalidArgument(path.string() + ": malformed header: " + e.what());
    }
    // d_model is authoritative: the tensor table must match the shape it implies
    DenoiserShape shape = shape_from_json(peek.at("shape"));
    shape.d_model = peek.at("d_model").get<int>();

    auto [header, blocks] = read_file(path, "reflex-checkpoint", shape);
    DenoiserSpec spec;
    spec.snr_clip = header.value("snr_clip", spec.snr_clip);
    spec.shape = shape;
    spec.parameterization = parse_parameterization(header.at("parameterization").get<std::string>());
    spec.T = header.at("schedule").at("T").get<int>();
    spec.beta_min = header.at("schedule").at("beta_min").get<double>();
    spec.beta_max = header.at("schedule").at("beta_max").get<double>();
    spec.seed = header.at("seed").get<std::uint64_t>();
    const json& nj = header.at("normalizer");
    Normalizer n;
    n.spectral = nj.at("spectral").get<bool>();
    n.mean = matrix_from_json(nj.at("mean"), shape.agents, shape.steps * kChannels, "mean");
    n.scale = matrix_from_json(nj.at("scale"), shape.agents, shape.steps * kChannels, "scale");
    if (!(n.scale.array() > 0.0).all()) throw InvalidArgument("checkpoint: normalizer scale must be positive");
    return Denoiser(spec, std::move(blocks.front()), std::move(n));
}

void save_train_state(const std::filesystem::path& path, const TrainState& state) {
    const bool adam = state.second_moment.tensors[0].size() > 0;
    if (adam && !(state.second_moment.shape == state.velocity.shape))
        throw InvalidArgument("save_train_state: moment buffers differ in shape");
    json header = {{"format", "reflex-train-state"},
                   {"version", kCheckpointVersion},
                   {"step", state.step},
                   {"blocks", adam ? 2 : 1},
                   {"shape", shape_json(state.velocity.shape)},
                   {"tensors", tensor_table(state.velocity)}};
    if (adam)
        write_file(path, header, {&state.velocity, &state.second_moment});
    else
        write_file(path, header, {&state.velocity});
}

TrainState load_train_state(const std::filesystem::path& path, const DenoiserShape& shape) {
    auto [header, blocks] = read_file(path, "reflex-train-state", shape);
    TrainState s;
    s.step = header.at("step").get<int>();
    s.velocity = std::move(blocks[0]);
    if (blocks.size() > 1) s.second_moment = std::move(blocks[1]);
    return s;
}

// ---------------------------------------------------------------- instantiations

template struct DenoiserParams<float>;
template struct DenoiserParams<double>;

#define REFLEX_INSTANTIATE(T)                                                                                      \
    template VectorX<T> time_features<T>(int, int);                                                                \
    template DenoiserParams<T> init_params<T>(const DenoiserShape&, std::uint64_t);                                \
    template MatrixX<T> network_forward<T>(const DenoiserParams<T>&, const MatrixX<T>&, std::span<const int>,       \
                                           const MatrixX<T>&, ForwardCache<T>*);                                   \
    template void network_backward<T>(const DenoiserParams<T>&, const ForwardCache<T>&, const MatrixX<T>&,          \
                                      DenoiserParams<T>&);                                                          \
    template MatrixX<T> noise_from_head<T>(const MatrixX<T>&, const MatrixX<T>&, std::span<const int>,             \
                                           Parameterization, const NoiseSchedule&);                                \
    template std::vector<double> epsilon_loss<T>(const MatrixX<T>&, const MatrixX<T>&);                            \
    template LossAndGrad<T> loss_and_grads<T>(const DenoiserParams<T>&, const DenoiserSpec&, const NoiseSchedule&, \
                                              const TrainBatch<T>&, int);

REFLEX_INSTANTIATE(float)
REFLEX_INSTANTIATE(double)

#undef REFLEX_INSTANTIATE

}  // namespace reflex
