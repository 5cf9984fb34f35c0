#pragma once

// Identifiability metrics: mean correlation coefficient after optimal matching, affine
// alignment of sufficient statistics, and ELBO-based dimension selection.

#include <Eigen/Dense>

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ivae/errors.hpp"

namespace ivae {

using Matrix = Eigen::MatrixXd;

enum class CorrelationKind { pearson, spearman };

NLOHMANN_JSON_SERIALIZE_ENUM(CorrelationKind, {{CorrelationKind::pearson, "pearson"},
                                               {CorrelationKind::spearman, "spearman"}})

namespace detail {

// Average ranks (ties share the mean rank), 0-based.
inline Eigen::VectorXd ranks(const Eigen::VectorXd& v) {
    const Eigen::Index N = v.size();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(N));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v(a) < v(b); });
    Eigen::VectorXd r(N);
    for (Eigen::Index i = 0; i < N;) {
        Eigen::Index j = i;
        while (j + 1 < N && v(idx[static_cast<std::size_t>(j + 1)]) == v(idx[static_cast<std::size_t>(i)])) ++j;
        const double avg = 0.5 * static_cast<double>(i + j);
        for (Eigen::Index t = i; t <= j; ++t) r(idx[static_cast<std::size_t>(t)]) = avg;
        i = j + 1;
    }
    return r;
}

inline Matrix standardized(const Matrix& a, const char* which) {
    Matrix c = a.rowwise() - a.colwise().mean();
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
        const double norm = c.col(j).norm();
        if (!(norm > 1e-12 * std::sqrt(static_cast<double>(a.rows())) * (1.0 + a.col(j).cwiseAbs().maxCoeff())))
            throw DomainError(std::string("correlation_matrix: column ") + std::to_string(j) + " of " + which +
                              " is constant");
        c.col(j) /= norm;
    }
    return c;
}

}  // namespace detail

// Entry (i, j) is the correlation of a_i with b_j.
inline Matrix correlation_matrix(const Matrix& a, const Matrix& b, CorrelationKind kind = CorrelationKind::pearson) {
    if (a.rows() != b.rows()) throw ShapeError("correlation_matrix: row counts differ");
    if (a.rows() < 3) throw ShapeError("correlation_matrix: need at least 3 rows");
    Matrix A = a, B = b;
    if (kind == CorrelationKind::spearman) {
        for (Eigen::Index j = 0; j < A.cols(); ++j) A.col(j) = detail::ranks(a.col(j));
        for (Eigen::Index j = 0; j < B.cols(); ++j) B.col(j) = detail::ranks(b.col(j));
    }
    return detail::standardized(A, "the first argument").transpose() * detail::standardized(B, "the second argument");
}

// ---- linear sum assignment ----------------------------------------------------------------

struct Assignment {
    std::vector<std::size_t> col_of_row;
    double value = 0.0;
};

namespace detail {

// Minimum-cost perfect matching on a square matrix (shortest augmenting paths with potentials).
inline Assignment hungarian_min(const Matrix& cost) {
    const std::size_t n = static_cast<std::size_t>(cost.rows());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    Assignment a;
    a.col_of_row.assign(n, 0);
    for (std::size_t j = 1; j <= n; ++j)
        if (p[j]) a.col_of_row[p[j] - 1] = j - 1;
    for (std::size_t i = 0; i < n; ++i)
        a.value += cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a.col_of_row[i]));
    return a;
}

inline Matrix drop(const Matrix& m, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < cols.size(); ++j)
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                m(static_cast<Eigen::Index>(rows[i]), static_cast<Eigen::Index>(cols[j]));
    return out;
}

}  // namespace detail

// Row-to-column permutation maximizing sum |corr(i, perm[i])|. Among optimal permutations the
// lexicographically smallest (lowest column first, row by row) is returned for n <= 12.
inline Assignment assign(const Matrix& corr) {
    if (corr.rows() != corr.cols()) throw ShapeError("assign: matrix must be square");
    const std::size_t n = static_cast<std::size_t>(corr.rows());
    if (n == 0) return {};
    const Matrix cost = -corr.cwiseAbs();
    Assignment best = detail::hungarian_min(cost);
    const double optimum = best.value;
    const double tol = 1e-12 * (1.0 + std::abs(optimum));
    if (n <= 12) {
        std::vector<std::size_t> free_rows(n), free_cols(n);
        std::iota(free_rows.begin(), free_rows.end(), 0);
        std::iota(free_cols.begin(), free_cols.end(), 0);
        std::vector<std::size_t> chosen(n);
        double prefix = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            free_rows.erase(free_rows.begin());
            for (std::size_t jj = 0; jj < free_cols.size(); ++jj) {
                const std::size_t j = free_cols[jj];
                std::vector<std::size_t> rest_cols = free_cols;
                rest_cols.erase(rest_cols.begin() + static_cast<std::ptrdiff_t>(jj));
                const double c = cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
                const double rest = free_rows.empty() ? 0.0 : detail::hungarian_min(detail::drop(cost, free_rows, rest_cols)).value;
                if (prefix + c + rest <= optimum + tol) {
                    chosen[i] = j;
                    prefix += c;
                    free_cols = std::move(rest_cols);
                    break;
                }
            }
        }
        best.col_of_row = chosen;
    }
    best.value = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        best.value += std::abs(corr(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(best.col_of_row[i])));
    return best;
}

// ---- MCC ----------------------------------------------------------------------------------

struct EvalReport {
    double mcc = 0.0;
    Matrix correlations;                  // n x n, rows: true sources, cols: estimates
    std::vector<std::size_t> permutation;  // source i matched with estimate permutation[i]
    std::vector<int> signs;                // sign of the matched correlation
    std::vector<double> matched;           // |corr| per matched pair
    CorrelationKind kind = CorrelationKind::pearson;
    std::optional<double> alignment_r2;
    std::vector<std::string> notes;
};

inline EvalReport mcc(const Matrix& z_star, const Matrix& z_hat, CorrelationKind kind = CorrelationKind::pearson) {
    if (z_star.rows() != z_hat.rows() || z_star.cols() != z_hat.cols())
        throw ShapeError("mcc: sources and estimates must have identical shapes");
    EvalReport r;
    r.kind = kind;
    r.correlations = correlation_matrix(z_star, z_hat, kind);
    const Assignment a = assign(r.correlations);
    r.permutation = a.col_of_row;
    double s = 0.0;
    for (std::size_t i = 0; i < a.col_of_row.size(); ++i) {
        const double c = r.correlations(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a.col_of_row[i]));
        r.signs.push_back(c < 0 ? -1 : 1);
        r.matched.push_back(std::abs(c));
        s += std::abs(c);
    }
    r.mcc = s / static_cast<double>(a.col_of_row.size());
    return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
    std::vector<std::vector<double>> corr;
    for (Eigen::Index i = 0; i < r.correlations.rows(); ++i) {
        corr.emplace_back();
        for (Eigen::Index j = 0; j < r.correlations.cols(); ++j) corr.back().push_back(r.correlations(i, j));
    }
    nlohmann::json j = {{"mcc", r.mcc},
                        {"correlation_kind", r.kind},
                        {"correlations", corr},
                        {"permutation", r.permutation},
                        {"signs", r.signs},
                        {"matched", r.matched},
                        {"notes", r.notes}};
    j["alignment_r2"] = r.alignment_r2 ? nlohmann::json(*r.alignment_r2) : nlohmann::json(nullptr);
    return j;
}

// ---- affine alignment ----------------------------------------------------------------------

struct AlignmentResult {
    Matrix A;                // m x m, Tz_star ~ A Tz_hat + c
    Eigen::VectorXd c;
    std::vector<double> r2;  // per output coordinate
    double mean_r2 = 0.0;
    double smallest_singular = 0.0;
    double largest_singular = 0.0;
    bool ridge_used = false;
};

// Least-squares fit of Tz_star = A Tz_hat + c over rows (each row one datapoint).
inline AlignmentResult affine_align(const Matrix& tz_star, const Matrix& tz_hat) {
    if (tz_star.rows() != tz_hat.rows()) throw ShapeError("affine_align: row counts differ");
    const Eigen::Index N = tz_hat.rows(), p = tz_hat.cols(), m = tz_star.cols();
    if (N <= p) throw ShapeError("affine_align: need more rows than statistics");
    Matrix design(N, p + 1);
    design << tz_hat, Eigen::VectorXd::Ones(N);
    Eigen::ColPivHouseholderQR<Matrix> qr(design);
    AlignmentResult res;
    if (qr.rank() < p + 1) throw DomainError("affine_align: design matrix is rank deficient (collinear statistics)");
    Matrix coef;
    const double cond = [&] {
        const Eigen::VectorXd d = qr.matrixR().diagonal().cwiseAbs();
        return d.maxCoeff() / d.minCoeff();
    }();
    if (cond > 1e10) {
        // ill-conditioned: ridge-regularized normal equations
        Matrix g = design.transpose() * design;
        g.diagonal().array() += 1e-8 * g.diagonal().maxCoeff();
        coef = g.ldlt().solve(design.transpose() * tz_star);
        res.ridge_used = true;
    } else {
        coef = qr.solve(tz_star);
    }
    res.A = coef.topRows(p).transpose();
    res.c = coef.row(p).transpose();
    const Matrix resid = tz_star - design * coef;
    double total = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) {
        const double tss = (tz_star.col(j).array() - tz_star.col(j).mean()).square().sum();
        const double rss = resid.col(j).squaredNorm();
        res.r2.push_back(tss > 0 ? 1.0 - rss / tss : (rss == 0 ? 1.0 : 0.0));
        total += res.r2.back();
    }
    res.mean_r2 = total / static_cast<double>(m);
    const Eigen::VectorXd s = Eigen::JacobiSVD<Matrix>(res.A).singularValues();
    res.largest_singular = s(0);
    res.smallest_singular = s(s.size() - 1);
    return res;
}

// ---- dimension selection ---------------------------------------------------------------------

enum class KneeStatus { ok, no_knee };

struct KneeResult {
    KneeStatus status = KneeStatus::no_knee;
    std::optional<int> knee;
    std::vector<double> smoothed;   // nondecreasing fit of the ELBO curve
    std::vector<double> curvature;  // slope drop at each interior point
};

// Nondecreasing least-squares fit (pool adjacent violators).
inline std::vector<double> isotonic_increasing(const std::vector<double>& y) {
    std::vector<double> level;
    std::vector<std::size_t> count;
    for (double v : y) {
        level.push_back(v);
        count.push_back(1);
        while (level.size() > 1 && level[level.size() - 2] > level.back()) {
            const std::size_t c2 = count.back(), c1 = count[count.size() - 2];
            const double merged = (level[level.size() - 2] * c1 + level.back() * c2) / static_cast<double>(c1 + c2);
            level.pop_back();
            count.pop_back();
            level.back() = merged;
            count.back() = c1 + c2;
        }
    }
    std::vector<double> out;
    for (std::size_t i = 0; i < level.size(); ++i) out.insert(out.end(), count[i], level[i]);
    return out;
}

// Knee of the ELBO-versus-dimension curve: the interior point where the slope drops the most
// after monotone smoothing. A curve with no slope drop reports no_knee.
inline KneeResult select_dimension(const std::map<int, double>& elbo_by_n) {
    if (elbo_by_n.size() < 4) throw ConfigError("select_dimension: need at least 4 candidate dimensions");
    std::vector<double> xs, ys;
    for (auto [n, e] : elbo_by_n) {
        if (!std::isfinite(e)) throw DomainError("select_dimension: non-finite ELBO");
        xs.push_back(n);
        ys.push_back(e);
    }
    KneeResult r;
    r.smoothed = isotonic_increasing(ys);
    const double range = r.smoothed.back() - r.smoothed.front();
    double best = 0.0;
    for (std::size_t i = 1; i + 1 < xs.size(); ++i) {
        const double left = (r.smoothed[i] - r.smoothed[i - 1]) / (xs[i] - xs[i - 1]);
        const double right = (r.smoothed[i + 1] - r.smoothed[i]) / (xs[i + 1] - xs[i]);
        const double drop = left - right;
        r.curvature.push_back(drop);
        if (drop > best) {
            best = drop;
            r.knee = static_cast<int>(xs[i]);
        }
    }
    const double span = xs.back() - xs.front();
    if (!(best > 1e-9 * (1.0 + std::abs(range) / span))) {
        r.knee.reset();
        r.status = KneeStatus::no_knee;
    } else {
        r.status = KneeStatus::ok;
    }
    return r;
}

}  // namespace ivae
