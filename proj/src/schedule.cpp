#include "storydiff/schedule.hpp"

namespace storydiff {

NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ValidationError("build_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw ValidationError("build_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.alpha.resize(size_t(T));
    s.alpha_bar.resize(size_t(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        double beta = T == 1 ? beta_start
                             : beta_start + (beta_end - beta_start) * double(t) / double(T - 1);
        double a = 1.0 - beta;
        prod *= a;
        s.alpha[size_t(t)] = a;
        s.alpha_bar[size_t(t)] = prod;
    }
    return s;
}

}  // namespace storydiff
