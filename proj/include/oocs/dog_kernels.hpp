#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace oocs::dog {

enum class Polarity { On, Off };

const char* to_string(Polarity p);
Polarity polarity_from_string(const std::string& s);

/// Analytic specification of a balanced center-surround kernel.
/// The surround radius spans half the kernel, the center radius is
/// gamma times that, and sigma follows from the zero-crossing condition.
struct DogParams {
    int kernel_size = 5;
    double gamma = 2.0 / 3.0;   // center-to-surround radius ratio, in (0,1)
    double sigma = 0.0;
    double center_radius = 0.0;
    double surround_radius = 0.0;
    Polarity polarity = Polarity::On;

    static DogParams make(int kernel_size, double gamma, Polarity polarity);
};

/// Discrete kernel after balance normalization: positive entries sum to +1,
/// negative entries to -1.
struct KernelMatrix {
    int size = 0;
    std::vector<double> weights;  // size*size, row-major
    double positive_sum = 0.0;
    double negative_sum = 0.0;
    int positive_count = 0;
    int negative_count = 0;

    double at(int row, int col) const { return weights[row * size + col]; }
};

struct BalanceReport {
    double positive_mass = 0.0;
    double negative_mass = 0.0;
    double total = 0.0;
    double max_abs_entry = 0.0;
};

/// Sigma such that the DoG with equal coefficients crosses zero at
/// radius center_radius: sigma = (r_c / 2 gamma) sqrt((1 - gamma^2) / -ln gamma).
double sigma_from_radius(double center_radius, double gamma);

/// Center-surround DoG with explicit coefficients:
/// (a_c / gamma^2) exp(-(x^2+y^2)/(2 gamma^2 sigma^2)) - a_s exp(-(x^2+y^2)/(2 sigma^2)).
double dog_petkov(double x, double y, double sigma, double gamma, double a_c, double a_s);

/// Classic two-Gaussian difference with free variances; comparison kernel only.
/// k1 exp(-(x^2+y^2)/sigma1) - k2 exp(-(x^2+y^2)/sigma2).
double dog_rodieck(double x, double y, double k1, double k2, double sigma1, double sigma2);

/// Sample the DoG at integer pixel offsets and normalize each sign class.
KernelMatrix build_oocs_kernel(int kernel_size, double gamma, Polarity polarity);

/// Same sign partition, but uniform weights 1/n_c on the center and -1/n_s
/// on the surround.
KernelMatrix build_flat_kernel(int kernel_size, double gamma, Polarity polarity);

/// Riemann-sum check that the positive and negative half-wave masses of the
/// continuous DoG cancel over a finite square domain.
BalanceReport continuous_balance_check(double sigma, double gamma,
                                       double domain_radius, double grid_step);

/// Plain-text kernel format. Header line:
/// `# oocs kernel size=<k> gamma=<num>/<den> polarity=<on|off>`
/// then one row per line, >= 12 significant digits, space separated.
void write_kernel_text(std::ostream& out, const KernelMatrix& kernel,
                       int gamma_num, int gamma_den, Polarity polarity);

/// Best rational approximation with a bounded denominator, used when a gamma
/// arrives as a decimal but the kernel header wants a fraction.
std::pair<int, int> rational_approx(double value, int max_den = 1000);

}  // namespace oocs::dog
