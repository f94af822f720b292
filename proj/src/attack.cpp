#include "ntklab/attack.hpp"

#include <algorithm>
#include <fstream>

#include "ntklab/nn_batch.hpp"
#include "ntklab/rng.hpp"

namespace ntklab {

void AttackConfig::validate() const {
    require(m >= 1, "attack: m must be >= 1");
    require(iters >= 0, "attack: iters must be >= 0");
    require(adam_lr > 0.0, "attack: adam_lr must be > 0");
    require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
            "attack: adam betas must be in [0, 1)");
    require(adam_eps > 0.0, "attack: adam_eps must be > 0");
    require(image_init_std > 0.0, "attack: image_init_std must be > 0");
    require(dual_init_lo < dual_init_hi, "attack: dual init range is empty");
    require(temp_start > 0.0 && temp_end > 0.0, "attack: temperatures must be > 0");
    if (batch_size)
        require(*batch_size >= 1 && *batch_size <= m, "attack: batch_size must be in [1, m]");
}

double temperature_at(long iter, const AttackConfig& cfg) {
    require(iter >= 0 && iter <= cfg.iters, "temperature_at: iter out of range");
    if (cfg.iters == 0) return cfg.temp_start;
    const double frac = static_cast<double>(iter) / static_cast<double>(cfg.iters);
    return cfg.temp_start + (cfg.temp_end - cfg.temp_start) * frac;
}

namespace {

void validate_targets(const ParamLayout& L, const AttackTargets& t, KernelChoice choice) {
    require(t.delta_theta.size() == L.total, "attack: delta_theta length mismatch");
    if (choice == KernelChoice::final_params || choice == KernelChoice::hybrid)
        require(t.theta_final.size() == L.total,
                "attack: theta_final required for this kernel choice");
    if (choice == KernelChoice::initial_params || choice == KernelChoice::hybrid)
        require(t.theta_initial.size() == L.total,
                "attack: theta_initial required for this kernel choice");
}

// One tangent bank: evaluation parameters plus scratch for the passes.
template <typename S>
struct Bank {
    VecX<S> theta;
    ForwardPass<S> fp;
    JvpPass<S> jp;

    explicit Bank(const Vec& t) : theta(t.template cast<S>()) {}
};

template <typename S>
struct LossGrads {
    double loss = 0.0;
    MatX<S> grad_images;          // d x B
    MatX<S> grad_duals_primary;   // C x B
    MatX<S> grad_duals_secondary; // C x B, hybrid only
    VecX<S> G;                    // gradient sum over the supplied columns
};

// The primary dual bank pairs with theta_final for final/hybrid and with
// theta_initial for initial-only; the secondary bank exists only in hybrid
// mode and pairs with theta_initial.
template <typename S>
class AttackEngine {
   public:
    AttackEngine(const Architecture& arch, const AttackTargets& targets, KernelChoice choice)
        : L_(ParamLayout::of(arch)), choice_(choice),
          delta_(targets.delta_theta.template cast<S>()) {
        require(arch.activation == Activation::softplus,
                "recon_loss: relu is rejected (image gradients need the mixed second derivative)");
        validate_targets(L_, targets, choice);
        primary_.emplace(choice == KernelChoice::initial_params ? targets.theta_initial
                                                                : targets.theta_final);
        if (choice == KernelChoice::hybrid) secondary_.emplace(targets.theta_initial);
    }

    bool hybrid() const { return choice_ == KernelChoice::hybrid; }
    const ParamLayout& layout() const { return L_; }

    // Gradient sum over the supplied columns: G = sum_j alpha_j^T grad f(x_j)
    // per active bank. Forward passes are cached for the derivative step.
    VecX<S> gradient_sum(const MatX<S>& Xc, const MatX<S>& Up, const MatX<S>& Us, double tau) {
        const Act act{Activation::softplus, tau};
        VecX<S> G;
        {
            NetView<S> net(L_, primary_->theta.data());
            forward_batch<S>(L_, net, act, Xc, primary_->fp, true);
            vjp_sum_batch<S>(L_, net, act, Xc, Up, primary_->fp, G, false);
        }
        if (hybrid()) {
            NetView<S> net(L_, secondary_->theta.data());
            forward_batch<S>(L_, net, act, Xc, secondary_->fp, true);
            vjp_sum_batch<S>(L_, net, act, Xc, Us, secondary_->fp, G, true);
        }
        return G;
    }

    // Loss + gradients. Dual banks are C x B (columns aligned with Xc).
    // G_total_override measures the loss against an external total (batched
    // driver); gradients always flow through the supplied columns only.
    LossGrads<S> evaluate(const MatX<S>& Xc, const MatX<S>& Up, const MatX<S>& Us, double tau,
                          const VecX<S>* G_total_override) {
        const Act act{Activation::softplus, tau};
        LossGrads<S> out;
        out.G = gradient_sum(Xc, Up, Us, tau);
        VecX<S> R = (G_total_override ? *G_total_override : out.G) - delta_;
        out.loss = static_cast<double>(R.squaredNorm());
        R *= S(2);

        {
            NetView<S> net(L_, primary_->theta.data());
            NetView<S> dir(L_, R.data());
            jvp_batch<S>(L_, net, dir, act, Xc, primary_->fp, primary_->jp);
            out.grad_duals_primary = primary_->jp.TF;
            input_grad_batch<S>(L_, net, dir, act, Xc, Up, primary_->fp, primary_->jp,
                                out.grad_images);
        }
        if (hybrid()) {
            NetView<S> net(L_, secondary_->theta.data());
            NetView<S> dir(L_, R.data());
            jvp_batch<S>(L_, net, dir, act, Xc, secondary_->fp, secondary_->jp);
            out.grad_duals_secondary = secondary_->jp.TF;
            MatX<S> gX;
            input_grad_batch<S>(L_, net, dir, act, Xc, Us, secondary_->fp, secondary_->jp, gX);
            out.grad_images += gX;
        }
        return out;
    }

   private:
    ParamLayout L_;
    KernelChoice choice_;
    VecX<S> delta_;
    std::optional<Bank<S>> primary_;
    std::optional<Bank<S>> secondary_;
};

// Elementwise Adam with per-column step counts (columns are images).
struct AdamState {
    Mat m1, m2;
    std::vector<long> steps;

    void init(Eigen::Index rows, Eigen::Index cols) {
        m1 = Mat::Zero(rows, cols);
        m2 = Mat::Zero(rows, cols);
        steps.assign(static_cast<std::size_t>(cols), 0);
    }

    void update_column(Eigen::Index col, Mat& param, const Eigen::Ref<const Vec>& grad,
                       const AttackConfig& cfg) {
        long& t = steps[static_cast<std::size_t>(col)];
        ++t;
        const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
        m1.col(col) = cfg.adam_beta1 * m1.col(col) + (1.0 - cfg.adam_beta1) * grad;
        m2.col(col) = cfg.adam_beta2 * m2.col(col) + (1.0 - cfg.adam_beta2) * grad.cwiseProduct(grad);
        param.col(col).array() -= cfg.adam_lr * (m1.col(col).array() / c1) /
                                  ((m2.col(col).array() / c2).sqrt() + cfg.adam_eps);
    }
};

ReconstructionSet init_recon(const ParamLayout& L, const AttackConfig& cfg, bool hybrid) {
    Rng rng(cfg.seed);
    ReconstructionSet rs;
    rs.images.resize(cfg.m, L.d);
    for (Eigen::Index i = 0; i < rs.images.rows(); ++i)
        for (Eigen::Index j = 0; j < rs.images.cols(); ++j)
            rs.images(i, j) = cfg.image_init_std * rng.normal();
    rs.duals.resize(cfg.m, L.c);
    for (Eigen::Index i = 0; i < rs.duals.rows(); ++i)
        for (Eigen::Index j = 0; j < rs.duals.cols(); ++j)
            rs.duals(i, j) = rng.uniform(cfg.dual_init_lo, cfg.dual_init_hi);
    if (hybrid) {
        rs.duals_initial.resize(cfg.m, L.c);
        for (Eigen::Index i = 0; i < rs.duals_initial.rows(); ++i)
            for (Eigen::Index j = 0; j < rs.duals_initial.cols(); ++j)
                rs.duals_initial(i, j) = rng.uniform(cfg.dual_init_lo, cfg.dual_init_hi);
    }
    return rs;
}

template <typename S>
AttackTrace run_attack_impl(const Architecture& arch, const AttackTargets& targets,
                            const AttackConfig& cfg, bool batched) {
    cfg.validate();
    require(!batched || cfg.batch_size.has_value(), "run_attack_batched: batch_size must be set");
    Architecture eval_arch = arch;
    eval_arch.activation = Activation::softplus;
    AttackEngine<S> engine(eval_arch, targets, cfg.kernel_choice);
    const ParamLayout& L = engine.layout();
    const bool hybrid = engine.hybrid();
    const int M = cfg.m;
    const int B = batched ? *cfg.batch_size : M;

    AttackTrace trace;
    ReconstructionSet init = init_recon(L, cfg, hybrid);
    Rng batch_rng(cfg.seed + 1);

    AdamState adam_img, adam_dual, adam_dual0;
    adam_img.init(L.d, M);
    adam_dual.init(L.c, M);
    if (hybrid) adam_dual0.init(L.c, M);
    Mat images_cols = init.images.transpose();  // d x M
    Mat duals_cols = init.duals.transpose();    // C x M
    Mat duals0_cols = hybrid ? Mat(init.duals_initial.transpose()) : Mat(0, 0);

    trace.best_loss = std::numeric_limits<double>::infinity();
    trace.loss_history.reserve(static_cast<std::size_t>(cfg.iters) + 1);

    auto snapshot = [&](double loss, long iter) {
        if (loss < trace.best_loss) {
            trace.best_loss = loss;
            trace.best_iter = iter;
            trace.best.images = images_cols.transpose();
            trace.best.duals = duals_cols.transpose();
            if (hybrid) trace.best.duals_initial = duals0_cols.transpose();
        }
    };

    // Buffered total gradient sum. Each member's contribution is stamped with
    // the temperature it was written at; subtract-old always re-evaluates at
    // that stamp so the buffer is exactly sum_j g_j(params_j, tau_j) at all
    // times (annealing cannot leave residue behind).
    VecX<S> G_R;
    std::vector<double> written_tau;
    auto grouped_sum = [&](const std::vector<int>& members) {
        VecX<S> acc = VecX<S>::Zero(L.total);
        std::size_t k = 0;
        while (k < members.size()) {
            std::size_t e = k + 1;
            while (e < members.size() &&
                   written_tau[static_cast<std::size_t>(members[e])] ==
                       written_tau[static_cast<std::size_t>(members[k])])
                ++e;
            Mat gi(L.d, static_cast<Eigen::Index>(e - k));
            Mat gd(L.c, static_cast<Eigen::Index>(e - k));
            Mat gd0(0, 0);
            if (hybrid) gd0.resize(L.c, static_cast<Eigen::Index>(e - k));
            for (std::size_t q = k; q < e; ++q) {
                gi.col(static_cast<Eigen::Index>(q - k)) = images_cols.col(members[q]);
                gd.col(static_cast<Eigen::Index>(q - k)) = duals_cols.col(members[q]);
                if (hybrid) gd0.col(static_cast<Eigen::Index>(q - k)) = duals0_cols.col(members[q]);
            }
            MatX<S> Xg = gi.cast<S>();
            acc += engine.gradient_sum(Xg, MatX<S>(gd.cast<S>()),
                                       hybrid ? MatX<S>(gd0.cast<S>()) : MatX<S>(),
                                       written_tau[static_cast<std::size_t>(members[k])]);
            k = e;
        }
        return acc;
    };
    if (batched) {
        MatX<S> Xc = images_cols.cast<S>();
        G_R = engine.gradient_sum(Xc, MatX<S>(duals_cols.cast<S>()),
                                  hybrid ? MatX<S>(duals0_cols.cast<S>()) : MatX<S>(),
                                  temperature_at(0, cfg));
        written_tau.assign(static_cast<std::size_t>(M), temperature_at(0, cfg));
    }

    for (long iter = 0; iter < cfg.iters; ++iter) {
        const double tau = temperature_at(iter, cfg);
        if (!batched) {
            MatX<S> Xc = images_cols.cast<S>();
            auto lg = engine.evaluate(Xc, MatX<S>(duals_cols.cast<S>()),
                                      hybrid ? MatX<S>(duals0_cols.cast<S>()) : MatX<S>(), tau,
                                      nullptr);
            trace.loss_history.push_back(lg.loss);
            if (!std::isfinite(lg.loss)) {
                trace.aborted_nonfinite = true;
                break;
            }
            snapshot(lg.loss, iter);
            Mat gI = lg.grad_images.template cast<double>();
            Mat gDf = lg.grad_duals_primary.template cast<double>();
            Mat gD0 = hybrid ? Mat(lg.grad_duals_secondary.template cast<double>()) : Mat(0, 0);
            for (int j = 0; j < M; ++j) {
                adam_img.update_column(j, images_cols, gI.col(j), cfg);
                adam_dual.update_column(j, duals_cols, gDf.col(j), cfg);
                if (hybrid) adam_dual0.update_column(j, duals0_cols, gD0.col(j), cfg);
            }
        } else {
            std::vector<int> batch = batch_rng.sample_indices(M, B);
            std::sort(batch.begin(), batch.end());
            VecX<S> G_B_old = grouped_sum(batch);
            Mat bimg(L.d, B), bdual(L.c, B), bdual0(0, 0);
            if (hybrid) bdual0.resize(L.c, B);
            for (int k = 0; k < B; ++k) {
                bimg.col(k) = images_cols.col(batch[k]);
                bdual.col(k) = duals_cols.col(batch[k]);
                if (hybrid) bdual0.col(k) = duals0_cols.col(batch[k]);
            }
            MatX<S> Xb = bimg.cast<S>();
            auto lg = engine.evaluate(Xb, MatX<S>(bdual.cast<S>()),
                                      hybrid ? MatX<S>(bdual0.cast<S>()) : MatX<S>(), tau, &G_R);
            trace.loss_history.push_back(lg.loss);
            if (!std::isfinite(lg.loss)) {
                trace.aborted_nonfinite = true;
                break;
            }
            snapshot(lg.loss, iter);
            Mat gI = lg.grad_images.template cast<double>();
            Mat gDf = lg.grad_duals_primary.template cast<double>();
            Mat gD0 = hybrid ? Mat(lg.grad_duals_secondary.template cast<double>()) : Mat(0, 0);
            for (int k = 0; k < B; ++k) {
                adam_img.update_column(batch[k], images_cols, gI.col(k), cfg);
                adam_dual.update_column(batch[k], duals_cols, gDf.col(k), cfg);
                if (hybrid) adam_dual0.update_column(batch[k], duals0_cols, gD0.col(k), cfg);
            }
            for (int k = 0; k < B; ++k) {
                bimg.col(k) = images_cols.col(batch[k]);
                bdual.col(k) = duals_cols.col(batch[k]);
                if (hybrid) bdual0.col(k) = duals0_cols.col(batch[k]);
            }
            // Rebuild the batch contribution at the temperature of next use;
            // with batch_size == M this makes the buffer bitwise equal to the
            // standard attack's next-step gradient sum.
            const double tau_next = temperature_at(iter + 1, cfg);
            MatX<S> Xb2 = bimg.cast<S>();
            VecX<S> G_B_new =
                engine.gradient_sum(Xb2, MatX<S>(bdual.cast<S>()),
                                    hybrid ? MatX<S>(bdual0.cast<S>()) : MatX<S>(), tau_next);
            G_R = G_R - G_B_old + G_B_new;
            for (int k = 0; k < B; ++k)
                written_tau[static_cast<std::size_t>(batch[k])] = tau_next;

            if (cfg.audit_stride > 0 && (iter + 1) % cfg.audit_stride == 0) {
                std::vector<int> all(M);
                for (int j = 0; j < M; ++j) all[j] = j;
                VecX<S> fresh = grouped_sum(all);
                const double denom = std::max(static_cast<double>(fresh.norm()), 1e-300);
                trace.buffer_audit_max_rel_err =
                    std::max(trace.buffer_audit_max_rel_err,
                             static_cast<double>((G_R - fresh).norm()) / denom);
            }
        }
    }

    trace.final_set.images = images_cols.transpose();
    trace.final_set.duals = duals_cols.transpose();
    if (hybrid) trace.final_set.duals_initial = duals0_cols.transpose();

    {
        const double tau = temperature_at(cfg.iters, cfg);
        MatX<S> Xc = images_cols.cast<S>();
        auto lg = engine.evaluate(Xc, MatX<S>(duals_cols.cast<S>()),
                                  hybrid ? MatX<S>(duals0_cols.cast<S>()) : MatX<S>(), tau,
                                  nullptr);
        trace.final_loss = lg.loss;
        snapshot(lg.loss, cfg.iters);
    }
    return trace;
}

}  // namespace

ReconLossResult recon_loss(const Architecture& arch, const AttackTargets& targets,
                           const ReconstructionSet& recon, double temperature,
                           KernelChoice choice) {
    require(recon.m() >= 1, "recon_loss: empty reconstruction set");
    require(recon.images.cols() == arch.input_dim, "recon_loss: image dimension mismatch");
    require(recon.duals.rows() == recon.images.rows() && recon.duals.cols() == arch.output_dim,
            "recon_loss: dual shape mismatch");
    if (choice == KernelChoice::hybrid)
        require(recon.duals_initial.rows() == recon.images.rows() &&
                    recon.duals_initial.cols() == arch.output_dim,
                "recon_loss: hybrid mode needs the second dual bank");

    AttackEngine<double> engine(arch, targets, choice);
    Mat Xc = recon.images.transpose();
    Mat Up = recon.duals.transpose();
    Mat Us = choice == KernelChoice::hybrid ? Mat(recon.duals_initial.transpose()) : Mat(0, 0);
    auto lg = engine.evaluate(Xc, Up, Us, temperature, nullptr);
    ReconLossResult out;
    out.loss = lg.loss;
    out.grad_images = lg.grad_images.transpose();
    out.grad_duals = lg.grad_duals_primary.transpose();
    if (choice == KernelChoice::hybrid)
        out.grad_duals_initial = lg.grad_duals_secondary.transpose();
    return out;
}

AttackTrace run_attack(const Architecture& arch, const AttackTargets& targets,
                       const AttackConfig& cfg) {
    if (cfg.precision == Precision::f32) return run_attack_impl<float>(arch, targets, cfg, false);
    return run_attack_impl<double>(arch, targets, cfg, false);
}

AttackTrace run_attack_batched(const Architecture& arch, const AttackTargets& targets,
                               const AttackConfig& cfg) {
    require(cfg.batch_size.has_value(), "run_attack_batched: batch_size must be set");
    if (cfg.precision == Precision::f32) return run_attack_impl<float>(arch, targets, cfg, true);
    return run_attack_impl<double>(arch, targets, cfg, true);
}

void save_trace_csv(const std::string& path, const AttackTrace& trace, const AttackConfig& cfg) {
    std::ofstream f(path);
    if (!f) throw ValidationError("save_trace_csv: cannot open " + path);
    f << "iter,loss,temperature\n";
    f.precision(12);
    for (std::size_t i = 0; i < trace.loss_history.size(); ++i)
        f << i << ',' << trace.loss_history[i] << ','
          << temperature_at(static_cast<long>(i), cfg) << '\n';
}

}  // namespace ntklab
