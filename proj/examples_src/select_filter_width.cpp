// Pick the width of a Gaussian filter for one Gamma-noisy image by
// minimizing SUKLS, and compare with the width the true KL loss would pick.
#include <cstdio>
#include <klrisk/klrisk.hpp>

using namespace klrisk;

int main() {
  const Grid2D shape{64, 64};
  const auto model = FamilyModel::gamma(3);
  Vec mu = generate_stripe_texture(shape);
  Vec y = sample(model, mu, 2024);

  std::printf("%8s %12s %12s %12s %12s\n", "tau", "SUKLS", "KLS", "DKLA", "KLA");
  double best_est = INFINITY, best_tau = 0, best_true = INFINITY, true_tau = 0;
  for (double tau = 0.25; tau <= 6.0; tau *= 1.25) {
    LinearFilter f(shape, tau);
    Linearization lin = f.linearize(y);
    Vec muh = floored_prediction(model, y, lin.value);
    double s = estimate(EstimatorId::Sukls, model, lin).value;
    double d = estimate(EstimatorId::Dkla, model, lin).value;
    double ls = kls(model, mu, muh), la = kla(model, mu, muh);
    std::printf("%8.3f %12.3f %12.3f %12.3f %12.3f\n", tau, s, ls, d, la);
    if (s < best_est) best_est = s, best_tau = tau;
    if (ls < best_true) best_true = ls, true_tau = tau;
  }
  std::printf("SUKLS picks tau = %.3f, the KLS oracle picks tau = %.3f\n", best_tau, true_tau);
}
