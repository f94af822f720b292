#include "ntklab/dynamics.hpp"

#include <cstring>
#include <fstream>

#include "ntklab/nn_batch.hpp"

namespace ntklab {

Mat encode_labels(LabelScheme scheme, const std::vector<int>& class_ids, int n_classes,
                  double negative_label) {
    require(!class_ids.empty(), "encode_labels: empty dataset");
    if (scheme == LabelScheme::binary) {
        require(n_classes == 2, "encode_labels: binary scheme needs n_classes == 2");
        Mat y(class_ids.size(), 1);
        for (std::size_t i = 0; i < class_ids.size(); ++i) {
            if (class_ids[i] == 1)
                y(static_cast<Eigen::Index>(i), 0) = 1.0;
            else if (class_ids[i] == 0)
                y(static_cast<Eigen::Index>(i), 0) = negative_label;
            else
                throw ValidationError("encode_labels: unknown binary class id " +
                                      std::to_string(class_ids[i]));
        }
        return y;
    }
    require(n_classes >= 2, "encode_labels: multiclass needs n_classes >= 2");
    Mat y = Mat::Constant(class_ids.size(), n_classes, -0.1);
    for (std::size_t i = 0; i < class_ids.size(); ++i) {
        const int c = class_ids[i];
        if (c < 0 || c >= n_classes)
            throw ValidationError("encode_labels: unknown class id " + std::to_string(c));
        y(static_cast<Eigen::Index>(i), c) = 0.9;
    }
    return y;
}

namespace {

void validate_train_inputs(const Architecture& arch, const Vec& theta0, const LabeledDataset& data,
                           const TrainConfig& cfg) {
    const ParamLayout L = ParamLayout::of(arch);
    require(theta0.size() == L.total, "train: parameter vector length mismatch");
    require(data.n() >= 1, "train: empty dataset");
    require(data.dim() == arch.input_dim, "train: image dimension mismatch");
    require(data.classes() == arch.output_dim, "train: label dimension mismatch");
    require(cfg.learning_rate > 0.0, "train: learning_rate must be > 0");
    require(cfg.momentum >= 0.0 && cfg.momentum < 1.0, "train: momentum must be in [0, 1)");
    require(cfg.max_iters >= 1, "train: max_iters must be >= 1");
}

struct LossGuard {
    double initial = -1.0;
    double factor;
    explicit LossGuard(double f) : factor(f) {}
    void check(double loss, long iter) {
        if (!std::isfinite(loss))
            throw NumericalError("train: non-finite loss at iteration " + std::to_string(iter));
        if (initial < 0.0) initial = loss;
        if (loss > factor * std::max(initial, 1e-300))
            throw NumericalError("train: diverged at iteration " + std::to_string(iter) +
                                 " (loss " + std::to_string(loss) + ")");
    }
};

// Exact linearized dynamics on the frozen per-(example, class) Gram. The
// residual vector and the coefficient vector of (theta - theta0) in the span
// of the theta0 tangent features evolve in closed form; theta_final is
// rebuilt with one batched VJP at the end.
TrainResult train_linearized_fast(const Architecture& arch, const Vec& theta0,
                                  const LabeledDataset& data, const TrainConfig& cfg) {
    const ParamLayout L = ParamLayout::of(arch);
    const int N = data.n(), C = L.c;
    const long NC = static_cast<long>(N) * C;

    Mat Kfull = empirical_ntk_full(arch, theta0, data.images);
    Mat Xc = data.images.transpose();
    NetView<double> net(L, theta0.data());
    ForwardPass<double> fp;
    forward_batch<double>(L, net, Act::of(arch), Xc, fp, true);

    Vec f(NC), y(NC);
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) {
            f[i * C + c] = fp.F(c, i);
            y[i * C + c] = data.labels(i, c);
        }

    TrainResult out;
    out.theta0 = theta0;
    Vec coeff = Vec::Zero(NC), cv = Vec::Zero(NC), u = Vec::Zero(NC);
    LossGuard guard(cfg.divergence_factor);
    const double invN = 1.0 / N;
    long iter = 1;
    double loss = 0.0;
    for (;; ++iter) {
        Vec r = f - y;
        loss = r.squaredNorm() * 0.5 * invN;
        guard.check(loss, iter);
        if (iter == 1 || (iter - 1) % cfg.loss_history_stride == 0)
            out.loss_history.emplace_back(iter, loss);
        if (cfg.early_stop_loss && loss < *cfg.early_stop_loss) break;
        if (iter > cfg.max_iters) break;
        r *= invN;
        cv = cfg.momentum * cv + r;
        coeff -= cfg.learning_rate * cv;
        u = cfg.momentum * u;
        u.noalias() += Kfull * r;
        f -= cfg.learning_rate * u;
    }
    out.stopped_at_iter = std::min(iter, cfg.max_iters);
    out.final_loss = loss;
    if (out.loss_history.empty() || out.loss_history.back().first != iter)
        out.loss_history.emplace_back(iter, loss);

    Mat U(C, N);
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) U(c, i) = coeff[i * C + c];
    Vec delta(L.total);
    vjp_sum_batch<double>(L, net, Act::of(arch), Xc, U, fp, delta);
    out.theta_final = theta0 + delta;
    out.alpha_integral = U.transpose();
    return out;
}

}  // namespace

TrainResult train(const Architecture& arch, const Vec& theta0, const LabeledDataset& data,
                  const TrainConfig& cfg) {
    validate_train_inputs(arch, theta0, data, cfg);
    if (cfg.dynamics == DynamicsMode::linearized && cfg.fast_linearized)
        return train_linearized_fast(arch, theta0, data, cfg);

    const ParamLayout L = ParamLayout::of(arch);
    const int N = data.n(), C = L.c;
    const Act act = Act::of(arch);
    Mat Xc = data.images.transpose();
    Mat Y = data.labels.transpose();  // C x N
    const bool linearized = cfg.dynamics == DynamicsMode::linearized;

    Vec theta = theta0;
    Vec velocity = Vec::Zero(L.total);
    Vec grad(L.total);
    Mat cv = Mat::Zero(C, N), coeff = Mat::Zero(C, N);

    // Frozen features for linearized mode.
    NetView<double> net0(L, theta0.data());
    ForwardPass<double> fp0;
    Mat F0;
    if (linearized) {
        forward_batch<double>(L, net0, act, Xc, fp0, true);
        F0 = fp0.F;
    }

    TrainResult out;
    out.theta0 = theta0;
    LossGuard guard(cfg.divergence_factor);
    const double invN = 1.0 / N;
    ForwardPass<double> fp;
    JvpPass<double> jp;
    long iter = 1;
    double loss = 0.0;
    for (;; ++iter) {
        Mat R;  // C x N residuals at current parameters
        if (linearized) {
            Vec dir = theta - theta0;
            NetView<double> dv(L, dir.data());
            jvp_batch<double>(L, net0, dv, act, Xc, fp0, jp);
            R = F0 + jp.TF - Y;
        } else {
            NetView<double> nv(L, theta.data());
            forward_batch<double>(L, nv, act, Xc, fp, true);
            R = fp.F - Y;
        }
        loss = R.squaredNorm() * 0.5 * invN;
        guard.check(loss, iter);
        if (iter == 1 || (iter - 1) % cfg.loss_history_stride == 0)
            out.loss_history.emplace_back(iter, loss);
        if (cfg.early_stop_loss && loss < *cfg.early_stop_loss) break;
        if (iter > cfg.max_iters) break;

        R *= invN;
        if (linearized) {
            NetView<double> nv0(L, theta0.data());
            vjp_sum_batch<double>(L, nv0, act, Xc, R, fp0, grad);
        } else {
            NetView<double> nv(L, theta.data());
            vjp_sum_batch<double>(L, nv, act, Xc, R, fp, grad);
        }
        velocity = cfg.momentum * velocity + grad;
        theta -= cfg.learning_rate * velocity;
        cv = cfg.momentum * cv + R;
        coeff -= cfg.learning_rate * cv;
    }
    out.stopped_at_iter = std::min(iter, cfg.max_iters);
    out.final_loss = loss;
    if (out.loss_history.empty() || out.loss_history.back().first != iter)
        out.loss_history.emplace_back(iter, loss);
    out.theta_final = theta;
    out.alpha_integral = coeff.transpose();
    return out;
}

Vec closed_form_delta_theta(const Architecture& arch, const Vec& theta0, const LabeledDataset& data,
                            const RidgePolicy& ridge) {
    const ParamLayout L = ParamLayout::of(arch);
    require(theta0.size() == L.total, "closed_form_delta_theta: parameter length mismatch");
    require(data.dim() == L.d && data.classes() == L.c,
            "closed_form_delta_theta: dataset shape mismatch");
    const int N = data.n(), C = L.c;

    Mat Kfull = empirical_ntk_full(arch, theta0, data.images);
    Mat Xc = data.images.transpose();
    NetView<double> net(L, theta0.data());
    ForwardPass<double> fp;
    forward_batch<double>(L, net, Act::of(arch), Xc, fp, true);

    Vec rhs(static_cast<long>(N) * C);
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) rhs[i * C + c] = data.labels(i, c) - fp.F(c, i);
    Vec beta = psd_solve(Kfull, rhs, ridge);

    Mat U(C, N);
    for (int i = 0; i < N; ++i)
        for (int c = 0; c < C; ++c) U(c, i) = beta[i * C + c];
    Vec delta(L.total);
    vjp_sum_batch<double>(L, net, Act::of(arch), Xc, U, fp, delta);
    return delta;
}

namespace {
constexpr char kCkptMagic[8] = {'N', 'T', 'K', 'C', 'K', 'P', 'T', '1'};

void write_vec(std::ofstream& f, const Vec& v) {
    const std::uint64_t n = static_cast<std::uint64_t>(v.size());
    f.write(reinterpret_cast<const char*>(&n), 8);
    f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(8 * n));
}

Vec read_vec(std::ifstream& f, const std::string& path) {
    std::uint64_t n = 0;
    f.read(reinterpret_cast<char*>(&n), 8);
    Vec v(static_cast<Eigen::Index>(n));
    f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(8 * n));
    if (!f) throw ValidationError("load_checkpoint: truncated file " + path);
    return v;
}
}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ValidationError("save_checkpoint: cannot open " + path);
    f.write(kCkptMagic, 8);
    const std::int32_t d = ck.arch.input_dim, w = ck.arch.hidden_width, c = ck.arch.output_dim;
    const std::uint8_t act = ck.arch.activation == Activation::relu ? 0 : 1;
    f.write(reinterpret_cast<const char*>(&d), 4);
    f.write(reinterpret_cast<const char*>(&w), 4);
    f.write(reinterpret_cast<const char*>(&c), 4);
    f.write(reinterpret_cast<const char*>(&act), 1);
    f.write(reinterpret_cast<const char*>(&ck.arch.temperature), 8);
    write_vec(f, ck.theta0);
    write_vec(f, ck.theta_final);
    if (!f) throw NumericalError("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ValidationError("load_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw ValidationError("load_checkpoint: bad magic in " + path);
    Checkpoint ck;
    std::int32_t d = 0, w = 0, c = 0;
    std::uint8_t act = 0;
    f.read(reinterpret_cast<char*>(&d), 4);
    f.read(reinterpret_cast<char*>(&w), 4);
    f.read(reinterpret_cast<char*>(&c), 4);
    f.read(reinterpret_cast<char*>(&act), 1);
    f.read(reinterpret_cast<char*>(&ck.arch.temperature), 8);
    ck.arch.input_dim = d;
    ck.arch.hidden_width = w;
    ck.arch.output_dim = c;
    ck.arch.activation = act == 0 ? Activation::relu : Activation::softplus;
    ck.theta0 = read_vec(f, path);
    ck.theta_final = read_vec(f, path);
    const ParamLayout L = ParamLayout::of(ck.arch);
    require(ck.theta0.size() == L.total && ck.theta_final.size() == L.total,
            "load_checkpoint: parameter length does not match header architecture");
    return ck;
}

}  // namespace ntklab
