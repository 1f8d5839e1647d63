#pragma once

#include <Eigen/Core>
#include <complex>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pisml/gfm.hpp"
#include "pisml/hybrid.hpp"
#include "pisml/microgrid.hpp"

namespace pisml::analysis {

using Field = std::function<Eigen::VectorXd(const Eigen::VectorXd& x, double u)>;
using Complex = std::complex<double>;

/// Central-difference Jacobian d f / d x, one column per state.
Eigen::MatrixXd numerical_jacobian(const Field& f, const Eigen::VectorXd& x, double u, double h = 1e-6);

/// All eigenvalues of a real square matrix (Hessenberg reduction and
/// shifted QR), sorted by real part descending, ties by imaginary part
/// descending. Every eigenpair is checked against ||Av - lv|| <= 1e-8 ||A||.
std::vector<Complex> eigenvalues(const Eigen::MatrixXd& A);

struct EigenSpectrum {
  std::vector<Complex> values;
  Eigen::VectorXd x;
  double u = 0.0;
  std::string model_id;
};

EigenSpectrum truth_spectrum(const sim::GfmParams& p, double u);

/// Spectrum of a learned model at its own equilibrium nearest to `seed`
/// (Newton seeded there), from the analytic hybrid Jacobian.
EigenSpectrum model_spectrum(const HybridModel& m, double u, const Eigen::VectorXd& seed,
                             const std::string& model_id);

/// Optimal assignment for a square cost matrix; returns col[row].
std::vector<int> hungarian(const Eigen::MatrixXd& cost);

/// 1-Wasserstein distance between equal-size point sets in the complex
/// plane (Euclidean ground metric): min-cost matching divided by n.
double wasserstein_distance(const std::vector<Complex>& a, const std::vector<Complex>& b);

/// Evaluation window on the sample grid: t0 <= t < t1, or t <= t1 when
/// `closed`.
struct Window {
  std::string name;
  double t0 = 0.0;
  double t1 = 0.0;
  bool closed = false;
  bool contains(double t) const;
};

Window iod_window();  // [0, 0.02)
Window ood_window();  // [0.02, 0.04]

/// Output channels used for error reporting: i_od, i_oq, v_cd, v_cq.
std::vector<int> default_channels();

struct ErrorReport {
  std::vector<int> channels;
  std::vector<double> per_channel;  // percent
  double mean = 0.0;                // percent
};

/// Relative L2 error in percent per channel, ||pred - truth|| / ||truth||
/// over the window, and its mean over channels. Throws ValidationError on
/// misaligned grids and NumericalError on a zero-norm truth channel.
ErrorReport relative_l2(const Trajectory& pred, const Trajectory& truth, const Window& w,
                        const std::vector<int>& channels = default_channels());

struct Complexity {
  int parameter_count = 0;
  int active_coefficients = 0;
};

Complexity complexity(const HybridModel& m);

/// Unit-1 replacement field backed by a learned model.
sim::UnitField unit_field(const HybridModel& m);

struct SweepSpec {
  int unit = 1;  // 0-based
  std::string name = "K_pV";
  double lo = 0.5;
  double hi = 4.0;
  int steps = 8;
};

struct SweepPoint {
  double value = 0.0;
  bool ok = false;
  std::string message;
  EigenSpectrum spectrum;
};

/// Eigenvalues of the reduced microgrid Jacobian at each sweep value. A
/// failed equilibrium flags the point and the sweep continues.
std::vector<SweepPoint> root_locus(const sim::MicrogridParams& mp, const SweepSpec& sweep,
                                   const sim::UnitField& unit1 = {});

/// Named control or droop parameter of a unit (m_p, m_q, K_pV, K_iV, K_pC, K_iC).
double& unit_parameter(sim::GfmParams& p, const std::string& name);

}  // namespace pisml::analysis
