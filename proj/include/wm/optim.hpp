#pragma once

// Adam optimizer over diffcore tensors, with optional global-norm gradient
// clipping and checkpointable moment state so training runs can resume
// byte-identically.

#include <cstdint>
#include <string>
#include <vector>

#include "wm/checkpoint.hpp"
#include "wm/tensor.hpp"

namespace wm::diff {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip = 0.0;  // global gradient norm cap; 0 disables clipping
};

class Adam {
  public:
    Adam(std::vector<Tensor> params, AdamConfig cfg);

    // Applies one update from the parameters' current gradient buffers.
    // Gradients not produced by the latest backward sweep count as zero.
    // Returns the pre-clip global gradient norm.
    double step();

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    int64_t steps_taken() const { return t_; }
    const std::vector<Tensor>& params() const { return params_; }

    // Moment state under "<prefix>m<i>" / "<prefix>v<i>"; the step count goes
    // into the manifest as "<prefix>steps".
    void save_state(ckpt::Checkpoint& c, const std::string& prefix) const;
    void load_state(const ckpt::Checkpoint& c, const std::string& prefix);

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    AdamConfig cfg_;
    int64_t t_ = 0;
};

}  // namespace wm::diff
