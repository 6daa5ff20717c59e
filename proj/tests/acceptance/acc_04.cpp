// Gradnorm contract: weights stay positive and renormalized to the task
// count after every update, a symmetric two-task problem keeps equal
// weights, and an over-strong task loses weight within one step.

#include <cmath>
#include <string>
#include <vector>

#include "acc_common.hpp"
#include "cbct/mtfs.hpp"

using namespace cbct;

int main(int, char**) {
  Acc acc("acc_04");
  try {
    Rng rng(64004);

    // random-walk stress: every update must leave a valid simplex point
    bool positive = true, normalized = true;
    double worst_sum = 0.0;
    for (int T : {2, 3}) {
      auto tw = mtfs::TaskWeights::init(T, 1.5);
      for (int step = 0; step < 100; ++step) {
        std::vector<double> losses((std::size_t)T), norms((std::size_t)T);
        for (int i = 0; i < T; ++i) {
          losses[(std::size_t)i] = rng.uniform(0.05, 5.0);
          norms[(std::size_t)i] = rng.uniform(0.01, 10.0);
        }
        tw = mtfs::gradnorm_step(losses, norms, std::move(tw), 0.05);
        double sum = 0.0;
        for (double w : tw.w) {
          if (!(w > 0.0)) positive = false;
          sum += w;
        }
        worst_sum = std::max(worst_sum, std::abs(sum - T));
        if (std::abs(sum - T) > 1e-6) normalized = false;
      }
    }
    acc.check(positive, "weights strictly positive after 200 random updates");
    acc.check(normalized, "sum(w) == task count within 1e-6, worst drift " +
                              sci(worst_sum));

    // perfectly symmetric two-task toy: identical losses and norms forever
    auto tw = mtfs::TaskWeights::init(2, 1.5);
    bool equal = true;
    for (int step = 0; step < 100; ++step) {
      const double l = 1.0 / (1.0 + 0.02 * step);
      const double g = 0.5 * l;
      tw = mtfs::gradnorm_step({l, l}, {g, g}, std::move(tw), 0.05);
      if (std::abs(tw.w[0] - tw.w[1]) > 1e-12 || std::abs(tw.w[0] - 1.0) > 1e-12)
        equal = false;
    }
    acc.check(equal, "symmetric two-task toy keeps w = {1,1} for 100 steps");

    // task 0 10x stronger gradient at equal losses: its weight must drop
    auto tw2 = mtfs::TaskWeights::init(2, 1.5);
    tw2 = mtfs::gradnorm_step({1.0, 1.0}, {10.0, 1.0}, std::move(tw2), 0.05);
    acc.check(tw2.w[0] < 1.0, "over-strong task weight fell to " +
                                  std::to_string(tw2.w[0]) + " in one step");
    acc.check(tw2.w[1] > 1.0, "weaker task weight rose to " +
                                  std::to_string(tw2.w[1]));
  } catch (const std::exception& e) {
    acc.check(false, std::string("unexpected exception: ") + e.what());
  }
  return acc.done("gradnorm update contract");
}
