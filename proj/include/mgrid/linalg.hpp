#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace mgrid {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

namespace linalg {

/// Largest eigenvalue of the symmetric part of `a`.
inline double max_eigenvalue(const Matrix& a) {
    if (a.size() == 0) return -std::numeric_limits<double>::infinity();
    const Matrix s = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(s, Eigen::EigenvaluesOnly);
    return es.eigenvalues()(s.rows() - 1);
}

inline double min_eigenvalue(const Matrix& a) {
    if (a.size() == 0) return std::numeric_limits<double>::infinity();
    const Matrix s = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(s, Eigen::EigenvaluesOnly);
    return es.eigenvalues()(0);
}

/// Top eigenpair of a symmetric matrix.
struct EigenPair {
    double value;
    Vector vector;
};

inline EigenPair top_eigenpair(const Matrix& a) {
    const Matrix s = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(s);
    const Index last = s.rows() - 1;
    return {es.eigenvalues()(last), es.eigenvectors().col(last)};
}

inline double spectral_norm(const Matrix& a) {
    if (a.size() == 0) return 0.0;
    Eigen::JacobiSVD<Matrix> svd(a);
    return svd.singularValues()(0);
}

/// Moore-Penrose pseudo-inverse; singular values below `rel_tol * sigma_max` are
/// treated as zero. `rank_deficient` is set when any were dropped.
inline Matrix pseudo_inverse(const Matrix& a, double rel_tol, bool* rank_deficient = nullptr) {
    Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& s = svd.singularValues();
    const double cutoff = s.size() > 0 ? rel_tol * s(0) : 0.0;
    Vector inv = Vector::Zero(s.size());
    bool deficient = false;
    for (Index i = 0; i < s.size(); ++i) {
        if (s(i) > cutoff && s(i) > 0.0)
            inv(i) = 1.0 / s(i);
        else
            deficient = true;
    }
    if (rank_deficient) *rank_deficient = deficient;
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// Symmetric inverse square root of a positive-definite matrix.
inline Matrix inverse_sqrt(const Matrix& spd) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(spd);
    const Vector d = es.eigenvalues().cwiseMax(1e-300).cwiseSqrt().cwiseInverse();
    return es.eigenvectors() * d.asDiagonal() * es.eigenvectors().transpose();
}

inline double max_abs(const Matrix& a) { return a.size() ? a.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace linalg
}  // namespace mgrid
