#include "wm/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace wm::diff {

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    if (params_.empty()) throw std::invalid_argument("Adam: no parameters");
    for (const auto& p : params_) {
        if (!p.defined() || !p.requires_grad())
            throw std::invalid_argument("Adam: parameter undefined or not trainable");
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

double Adam::step() {
    ++t_;
    double sq = 0.0;
    for (const auto& p : params_) {
        if (!grad_is_current(p)) continue;
        for (double gv : p.grad()) sq += gv * gv;
    }
    double norm = std::sqrt(sq);
    double gscale = (cfg_.clip > 0.0 && norm > cfg_.clip) ? cfg_.clip / norm : 1.0;

    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        bool fresh = grad_is_current(p);
        const std::vector<double>* gp = fresh ? &p.grad() : nullptr;
        auto& vals = p.d->v;
        auto& m = m_[i];
        auto& v = v_[i];
        for (size_t k = 0; k < vals.size(); ++k) {
            double gv = gp ? (*gp)[k] * gscale : 0.0;
            m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gv;
            v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gv * gv;
            double mh = m[k] / bc1;
            double vh = v[k] / bc2;
            vals[k] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
        }
    }
    return norm;
}

void Adam::save_state(ckpt::Checkpoint& c, const std::string& prefix) const {
    c.manifest[prefix + "steps"] = t_;
    for (size_t i = 0; i < params_.size(); ++i) {
        auto shape = params_[i].shape();
        Tensor m = Tensor::zeros(shape, false);
        Tensor v = Tensor::zeros(shape, false);
        m.d->v = m_[i];
        v.d->v = v_[i];
        c.add(prefix + "m" + std::to_string(i), m);
        c.add(prefix + "v" + std::to_string(i), v);
    }
}

void Adam::load_state(const ckpt::Checkpoint& c, const std::string& prefix) {
    t_ = c.manifest.at(prefix + "steps").get<int64_t>();
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor m = c.get(prefix + "m" + std::to_string(i));
        Tensor v = c.get(prefix + "v" + std::to_string(i));
        if (m.size() != params_[i].size() || v.size() != params_[i].size())
            throw std::runtime_error("Adam: moment shape mismatch for parameter " +
                                     std::to_string(i));
        m_[i] = m.d->v;
        v_[i] = v.d->v;
    }
}

}  // namespace wm::diff
