#include "oocs/dog_kernels.hpp"

#include <cmath>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace oocs::dog {

const char* to_string(Polarity p) { return p == Polarity::On ? "on" : "off"; }

Polarity polarity_from_string(const std::string& s) {
    if (s == "on") return Polarity::On;
    if (s == "off") return Polarity::Off;
    throw std::invalid_argument("polarity must be 'on' or 'off', got '" + s + "'");
}

static void check_gamma(double gamma) {
    if (!(gamma > 0.0 && gamma < 1.0))
        throw std::invalid_argument("gamma must lie strictly in (0,1)");
}

static void check_kernel_size(int kernel_size) {
    if (kernel_size < 3 || kernel_size % 2 == 0)
        throw std::invalid_argument("kernel size must be odd and >= 3");
}

double sigma_from_radius(double center_radius, double gamma) {
    check_gamma(gamma);
    if (!(center_radius > 0.0))
        throw std::invalid_argument("center radius must be positive");
    return center_radius / (2.0 * gamma) *
           std::sqrt((1.0 - gamma * gamma) / (-std::log(gamma)));
}

DogParams DogParams::make(int kernel_size, double gamma, Polarity polarity) {
    check_kernel_size(kernel_size);
    check_gamma(gamma);
    DogParams p;
    p.kernel_size = kernel_size;
    p.gamma = gamma;
    p.surround_radius = kernel_size / 2.0;
    p.center_radius = gamma * p.surround_radius;
    p.sigma = sigma_from_radius(p.center_radius, gamma);
    p.polarity = polarity;
    return p;
}

double dog_petkov(double x, double y, double sigma, double gamma, double a_c, double a_s) {
    check_gamma(gamma);
    if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
    const double r2 = x * x + y * y;
    const double s2 = 2.0 * sigma * sigma;
    return a_c / (gamma * gamma) * std::exp(-r2 / (gamma * gamma * s2)) -
           a_s * std::exp(-r2 / s2);
}

double dog_rodieck(double x, double y, double k1, double k2, double sigma1, double sigma2) {
    if (!(sigma1 > 0.0) || !(sigma2 > 0.0))
        throw std::invalid_argument("rodieck variances must be positive");
    const double r2 = x * x + y * y;
    return k1 * std::exp(-r2 / sigma1) - k2 * std::exp(-r2 / sigma2);
}

// Shared sign partition for both the analytic and the flat kernel: entry
// (i,j) is positive iff its radius from the center is below r_c. Entries
// within 1e-9 of zero would make the partition ambiguous; the default
// parameterizations never produce them at integer offsets.
namespace {

struct SignPartition {
    int size;
    std::vector<double> raw;   // sampled DoG values, On orientation
    std::vector<int> sign;     // +1 / -1 / 0
    int positive_count = 0;
    int negative_count = 0;
};

SignPartition partition_signs(int kernel_size, double gamma) {
    check_kernel_size(kernel_size);
    check_gamma(gamma);
    const DogParams p = DogParams::make(kernel_size, gamma, Polarity::On);
    const int half = kernel_size / 2;
    SignPartition part;
    part.size = kernel_size;
    part.raw.resize(static_cast<size_t>(kernel_size) * kernel_size);
    part.sign.resize(part.raw.size(), 0);
    for (int i = 0; i < kernel_size; ++i) {
        for (int j = 0; j < kernel_size; ++j) {
            const double y = i - half, x = j - half;
            const double v = dog_petkov(x, y, p.sigma, gamma, 1.0, 1.0);
            const size_t idx = static_cast<size_t>(i) * kernel_size + j;
            part.raw[idx] = v;
            if (std::abs(v) <= 1e-9) {
                part.sign[idx] = 0;  // measure-zero tie: contributes nothing
            } else if (v > 0.0) {
                part.sign[idx] = 1;
                ++part.positive_count;
            } else {
                part.sign[idx] = -1;
                ++part.negative_count;
            }
        }
    }
    if (part.positive_count == 0 || part.negative_count == 0)
        throw std::invalid_argument("degenerate kernel: a sign class is empty");
    return part;
}

KernelMatrix finalize(const SignPartition& part, std::vector<double> weights,
                      Polarity polarity) {
    KernelMatrix k;
    k.size = part.size;
    if (polarity == Polarity::Off)
        for (double& w : weights) w = -w;
    k.weights = std::move(weights);
    for (size_t i = 0; i < k.weights.size(); ++i) {
        const double w = k.weights[i];
        if (w > 0.0) {
            k.positive_sum += w;
            ++k.positive_count;
        } else if (w < 0.0) {
            k.negative_sum += w;
            ++k.negative_count;
        }
    }
    return k;
}

}  // namespace

KernelMatrix build_oocs_kernel(int kernel_size, double gamma, Polarity polarity) {
    const SignPartition part = partition_signs(kernel_size, gamma);
    double pos = 0.0, neg = 0.0;
    for (size_t i = 0; i < part.raw.size(); ++i) {
        if (part.sign[i] > 0) pos += part.raw[i];
        if (part.sign[i] < 0) neg += part.raw[i];
    }
    std::vector<double> weights(part.raw.size(), 0.0);
    for (size_t i = 0; i < part.raw.size(); ++i) {
        if (part.sign[i] > 0) weights[i] = part.raw[i] / pos;
        if (part.sign[i] < 0) weights[i] = part.raw[i] / (-neg);
    }
    return finalize(part, std::move(weights), polarity);
}

KernelMatrix build_flat_kernel(int kernel_size, double gamma, Polarity polarity) {
    const SignPartition part = partition_signs(kernel_size, gamma);
    std::vector<double> weights(part.raw.size(), 0.0);
    for (size_t i = 0; i < part.raw.size(); ++i) {
        if (part.sign[i] > 0) weights[i] = 1.0 / part.positive_count;
        if (part.sign[i] < 0) weights[i] = -1.0 / part.negative_count;
    }
    return finalize(part, std::move(weights), polarity);
}

BalanceReport continuous_balance_check(double sigma, double gamma,
                                       double domain_radius, double grid_step) {
    check_gamma(gamma);
    if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
    if (!(grid_step > 0.0) || !(domain_radius > 0.0))
        throw std::invalid_argument("domain radius and grid step must be positive");

    BalanceReport report;
    const long n = std::lround(std::ceil(domain_radius / grid_step));
    const double cell = grid_step * grid_step;
    // Midpoint rule over the square [-R, R]^2.
    for (long i = -n; i < n; ++i) {
        const double y = (i + 0.5) * grid_step;
        for (long j = -n; j < n; ++j) {
            const double x = (j + 0.5) * grid_step;
            const double v = dog_petkov(x, y, sigma, gamma, 1.0, 1.0);
            if (v > 0.0)
                report.positive_mass += v * cell;
            else
                report.negative_mass += v * cell;
            report.max_abs_entry = std::max(report.max_abs_entry, std::abs(v));
        }
    }
    report.total = report.positive_mass + report.negative_mass;
    return report;
}

void write_kernel_text(std::ostream& out, const KernelMatrix& kernel,
                       int gamma_num, int gamma_den, Polarity polarity) {
    out << "# oocs kernel size=" << kernel.size << " gamma=" << gamma_num << "/"
        << gamma_den << " polarity=" << to_string(polarity) << "\n";
    std::ostringstream row;
    row.precision(15);
    for (int i = 0; i < kernel.size; ++i) {
        row.str("");
        for (int j = 0; j < kernel.size; ++j) {
            if (j) row << " ";
            row << kernel.at(i, j);
        }
        out << row.str() << "\n";
    }
}

std::pair<int, int> rational_approx(double value, int max_den) {
    int best_num = 0, best_den = 1;
    double best_err = std::abs(value);
    for (int den = 1; den <= max_den; ++den) {
        const int num = static_cast<int>(std::lround(value * den));
        const double err = std::abs(value - static_cast<double>(num) / den);
        if (err + 1e-15 < best_err) {
            best_err = err;
            best_num = num;
            best_den = den;
        }
        if (best_err < 1e-12) break;
    }
    return {best_num, best_den};
}

}  // namespace oocs::dog
