#pragma once

#include "reflex/scenario.hpp"
#include "reflex/schedule.hpp"
#include "reflex/trajectory.hpp"
#include "reflex/types.hpp"

#include <array>
#include <atomic>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace reflex {

/// How the network head is read. `epsilon`: the head is the noise estimate.
/// `sample`: the head estimates x0 and the noise is recovered from x_t.
enum class Parameterization { epsilon, sample };

std::string_view to_string(Parameterization p);
Parameterization parse_parameterization(std::string_view name);

struct DenoiserShape {
    int agents = 3;  ///< ego + nearest neighbors carried in the diffusion state
    int steps = kHorizonSteps;
    int cond_dim = ConditionLayout::size();
    int d_model = 128;
    int time_features = 32;

    int state_dim() const { return agents * steps * kChannels; }
    bool operator==(const DenoiserShape&) const = default;
};

/// Sinusoidal features of the integer timestep, `count` entries (sin, cos pairs).
template <class T>
VectorX<T> time_features(int t, int count);

template <class T>
struct DenoiserParams {
    enum Index {
        time_w, time_b, cond_w, cond_b, state_w, state_b,
        hidden1_w, hidden1_b, hidden2_w, hidden2_b, out_w, out_b,
        count
    };
    static constexpr std::array<const char*, count> kNames = {
        "time.weight", "time.bias", "cond.weight", "cond.bias", "state.weight", "state.bias",
        "hidden1.weight", "hidden1.bias", "hidden2.weight", "hidden2.bias", "head.weight", "head.bias"};

    DenoiserShape shape;
    std::array<MatrixX<T>, count> tensors;

    /// Zero-filled parameters of the right shapes.
    static DenoiserParams zeros(const DenoiserShape& shape);
    static std::pair<int, int> tensor_shape(const DenoiserShape& shape, int index);

    MatrixX<T>& operator[](int i) { return tensors[static_cast<std::size_t>(i)]; }
    const MatrixX<T>& operator[](int i) const { return tensors[static_cast<std::size_t>(i)]; }

    Eigen::Index size() const;
    bool all_finite() const;
    void set_zero();

    /// Scalar access across all tensors in declaration order (column-major within a tensor).
    T& entry(Eigen::Index flat);
    T entry(Eigen::Index flat) const;
    /// (tensor name, index within the tensor) of a flat index.
    std::pair<std::string, Eigen::Index> locate(Eigen::Index flat) const;

    template <class U>
    DenoiserParams<U> cast() const {
        DenoiserParams<U> out;
        out.shape = shape;
        for (int i = 0; i < count; ++i) out[i] = (*this)[i].template cast<U>();
        return out;
    }
};

/// Fan-in scaled normal init: std = 1/sqrt(fan_in), zero biases.
template <class T>
DenoiserParams<T> init_params(const DenoiserShape& shape, std::uint64_t seed);

/// Activations kept for the backward pass.
template <class T>
struct ForwardCache {
    MatrixX<T> x, phi, c, h0, a0, h1, a1, h2, a2;
};

/// Raw head output for a batch: columns of x (state_dim) and c (cond_dim)
/// are samples, t holds one timestep per column.
template <class T>
MatrixX<T> network_forward(const DenoiserParams<T>& params, const MatrixX<T>& x, std::span<const int> t,
                           const MatrixX<T>& c, ForwardCache<T>* cache = nullptr);

/// Accumulates parameter gradients for head-output adjoint d_out.
template <class T>
void network_backward(const DenoiserParams<T>& params, const ForwardCache<T>& cache, const MatrixX<T>& d_out,
                      DenoiserParams<T>& grad);

/// Network plus the read-out that turns the head into a noise estimate.
struct DenoiserSpec {
    DenoiserShape shape;
    Parameterization parameterization = Parameterization::sample;
    int T = 100;
    double beta_min = 1e-3;
    double beta_max = 0.2;
    std::uint64_t seed = 0;
    /// Per-item loss weight min(1, snr_clip / SNR_t); 0 disables it.
    double snr_clip = 5.0;

    double loss_weight(const NoiseSchedule& s, int t) const;
    NoiseSchedule schedule() const { return make_schedule(T, beta_min, beta_max); }
};

/// Noise estimate from the head output (one column per sample).
template <class T>
MatrixX<T> noise_from_head(const MatrixX<T>& head, const MatrixX<T>& x_t, std::span<const int> t,
                           Parameterization p, const NoiseSchedule& schedule);

template <class T>
struct TrainBatch {
    MatrixX<T> x0;    ///< state_dim x B, model space
    MatrixX<T> eps;   ///< state_dim x B
    MatrixX<T> cond;  ///< cond_dim x B, already masked
    std::vector<int> t;
    Eigen::Index size() const { return x0.cols(); }
};

template <class T>
struct LossAndGrad {
    double loss = 0.0;
    std::vector<double> item_loss;
    DenoiserParams<T> grad;
};

/// Squared-norm noise error per column.
template <class T>
std::vector<double> epsilon_loss(const MatrixX<T>& predicted, const MatrixX<T>& eps);

/// Mean over the batch of ||eps - eps_hat||^2 and its gradient. The batch is
/// processed in fixed chunks that are reduced in order, so the result does
/// not depend on the worker count.
template <class T>
LossAndGrad<T> loss_and_grads(const DenoiserParams<T>& params, const DenoiserSpec& spec,
                              const NoiseSchedule& schedule, const TrainBatch<T>& batch, int workers = 1);

// ---------------------------------------------------------------- gradient check

struct GradProbe {
    Eigen::Index index = 0;
    std::string tensor;
    Eigen::Index local = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradProbe> probes;
    double max_rel_error = 0.0;
    GradProbe worst;
    double tolerance = 1e-3;
    bool passed() const { return max_rel_error <= tolerance; }
};

/// |a - b| / max(|a|, |b|), 0 when both vanish.
double relative_error(double a, double b);

using LossFunction = std::function<double(const DenoiserParams<double>&)>;

/// Central differences of `loss` against `analytic` on `probes` random
/// parameters plus any `forced` flat indices.
GradCheckReport grad_check(const DenoiserParams<double>& params, const LossFunction& loss,
                           const DenoiserParams<double>& analytic, int probes, std::uint64_t seed,
                           double step = 1e-4, std::vector<Eigen::Index> forced = {});

/// Builds a random batch for a tiny network and checks loss_and_grads.
GradCheckReport grad_check(const DenoiserParams<double>& params, const DenoiserSpec& spec, int probes,
                           std::uint64_t seed, int batch = 4);

// ---------------------------------------------------------------- model

/// Affine map between metres and the model's working space. Each entry is
/// centred on the data mean; in spectral mode every (row, channel) signal is
/// then taken through an orthonormal DCT-II along time, and each coefficient
/// is divided by its data spread, floored at `relative_floor` times the
/// largest spread of the same (row, channel). Layout is unchanged: the step index of a
/// spectral model vector is the frequency index.
struct Normalizer {
    Eigen::MatrixXd mean;   ///< agents x (steps * channels), metres
    Eigen::MatrixXd scale;  ///< agents x (steps * channels), per coefficient
    bool spectral = false;

    static Normalizer identity(int agents, int steps);
    static Normalizer fit(const std::vector<Trajectory>& data, int agents, double relative_floor = 0.04,
                          bool spectral = true, double min_scale = 1e-3);

    int agents() const { return static_cast<int>(mean.rows()); }
    int steps() const { return static_cast<int>(mean.cols()) / kChannels; }
    Eigen::VectorXd to_model(const Trajectory& traj) const;
    Trajectory from_model(const Eigen::VectorXd& x) const;
    /// Linear part only (no centring), for directions and increments.
    Trajectory direction_from_model(const Eigen::VectorXd& d) const;
    Eigen::VectorXd direction_to_model(const Trajectory& d) const;
};

/// Orthonormal DCT-II matrix (n x n); its transpose is the inverse.
const Eigen::MatrixXd& dct_matrix(int n);

/// Noise predictor interface used by the samplers. `predict` evaluates one
/// column per (x, c) pair at a shared timestep; every column counts as one
/// denoiser evaluation.
class NoiseModel {
public:
    NoiseModel() = default;
    NoiseModel(const NoiseModel&) : evaluations_(0) {}
    NoiseModel& operator=(const NoiseModel&) { return *this; }
    virtual ~NoiseModel() = default;
    virtual int state_dim() const = 0;
    virtual int cond_dim() const = 0;
    Eigen::MatrixXd predict(const Eigen::MatrixXd& x, int t, const Eigen::MatrixXd& c) const;
    Eigen::VectorXd predict(const Eigen::VectorXd& x, int t, const Eigen::VectorXd& c) const;

    std::uint64_t evaluations() const { return evaluations_.load(); }
    void reset_evaluations() const { evaluations_ = 0; }

protected:
    virtual Eigen::MatrixXd do_predict(const Eigen::MatrixXd& x, int t, const Eigen::MatrixXd& c) const = 0;

private:
    mutable std::atomic<std::uint64_t> evaluations_{0};
};

class Denoiser final : public NoiseModel {
public:
    Denoiser(DenoiserSpec spec, DenoiserParams<float> params, Normalizer normalizer);

    int state_dim() const override { return spec_.shape.state_dim(); }
    int cond_dim() const override { return spec_.shape.cond_dim; }

    const DenoiserSpec& spec() const { return spec_; }
    const DenoiserParams<float>& params() const { return params_; }
    const Normalizer& normalizer() const { return normalizer_; }
    const NoiseSchedule& schedule() const { return schedule_; }

protected:
    Eigen::MatrixXd do_predict(const Eigen::MatrixXd& x, int t, const Eigen::MatrixXd& c) const override;

private:
    DenoiserSpec spec_;
    DenoiserParams<float> params_;
    Normalizer normalizer_;
    NoiseSchedule schedule_;
};

// ---------------------------------------------------------------- training

struct TrainingExample {
    Trajectory x0;  ///< ego frame, metres; rows beyond the scene's agents are zero
    ConditionSet conditions;
};

enum class Optimizer { momentum, adam };

std::string_view to_string(Optimizer o);
Optimizer parse_optimizer(std::string_view name);

struct TrainConfig {
    double p_drop = 0.1;
    int batch = 64;
    int steps = 20000;
    double learning_rate = 3e-3;  ///< applied to the per-entry mean loss
    double final_lr_ratio = 0.02;
    double momentum = 0.9;  ///< also Adam's beta1
    double beta2 = 0.999;
    Optimizer optimizer = Optimizer::adam;
    double grad_clip = 1.0;
    int warmup_steps = 200;
    double spectral_floor = 0.04;  ///< Normalizer::fit relative floor
    int stop_at = 0;               ///< pause before this step (0: run all `steps`); the lr schedule still spans `steps`
    std::uint64_t seed = 1;
    DenoiserSpec model;
    int workers = 1;

    void validate() const;
};

struct TrainResult {
    Denoiser model;
    std::vector<double> loss_curve;
    std::uint64_t draws = 0;
    std::uint64_t decoupled_draws = 0;
    DenoiserParams<float> velocity;
    DenoiserParams<float> second_moment;  ///< Adam only; zeros otherwise
    int next_step = 0;
};

/// Optional warm start: parameters, optimizer velocity and first step index.
struct TrainResume {
    DenoiserParams<float> params;
    DenoiserParams<float> velocity;
    DenoiserParams<float> second_moment;  ///< Adam only
    int start_step = 0;
};

using TrainProgress = std::function<void(int step, double loss)>;

TrainResult train(const std::vector<TrainingExample>& data, const TrainConfig& cfg,
                  const TrainProgress& progress = {}, const TrainResume* resume = nullptr);

/// Thrown when the loss exceeds 1e3 times its first value.
class TrainingDiverged : public NumericalError {
public:
    TrainingDiverged(int step, double loss, double initial);
    int step;
    double loss, initial;
};

/// Training example from a scenario: ego-frame joint future of the ego and
/// its nearest `agents - 1` neighbors, plus condition encodings.
TrainingExample make_example(const Scenario& scenario, int agents);

// ---------------------------------------------------------------- checkpoints

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Denoiser& model);
Denoiser load_checkpoint(const std::filesystem::path& path);

/// Optimizer buffers and step counter beside a checkpoint, for resuming.
struct TrainState {
    DenoiserParams<float> velocity;
    DenoiserParams<float> second_moment;  ///< empty unless Adam
    int step = 0;
};

void save_train_state(const std::filesystem::path& path, const TrainState& state);
TrainState load_train_state(const std::filesystem::path& path, const DenoiserShape& shape);

extern template struct DenoiserParams<float>;
extern template struct DenoiserParams<double>;

}  // namespace reflex
