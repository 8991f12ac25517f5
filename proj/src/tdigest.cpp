#include "genemamba/tdigest.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numbers>
#include <ostream>
#include <string>

#include "genemamba/binary_io.hpp"
#include "genemamba/error.hpp"

namespace genemamba {

namespace {

// k1 scale function; adjacent points may share a centroid while the scale
// difference across it stays <= 1.
double k1(double q, double compression) {
    q = std::clamp(q, 0.0, 1.0);
    return compression / (2.0 * std::numbers::pi) * std::asin(2.0 * q - 1.0);
}

void absorb(TDigest::Centroid& into, const TDigest::Centroid& c) {
    const double w = into.weight + c.weight;
    into.mean = into.mean + (c.mean - into.mean) * (c.weight / w);
    into.weight = w;
}

}  // namespace

TDigest::TDigest(double compression) : compression_(compression) {
    if (!(compression >= kMinCompression) || !std::isfinite(compression))
        throw ConfigError("t-digest compression must be >= " + std::to_string(kMinCompression) + ", got " +
                          std::to_string(compression));
}

void TDigest::insert(double value) {
    if (!std::isfinite(value)) throw InputError("t-digest insert: non-finite value");
    if (total_weight_ == 0.0) {
        min_ = max_ = value;
    } else {
        min_ = std::min(min_, value);
        max_ = std::max(max_, value);
    }
    buffer_.push_back(value);
    total_weight_ += 1.0;
    if (buffer_.size() >= static_cast<std::size_t>(5.0 * compression_)) flush();
}

void TDigest::flush() const {
    if (buffer_.empty()) return;
    std::vector<Centroid> points = centroids_;
    points.reserve(points.size() + buffer_.size());
    for (double v : buffer_) points.push_back({v, 1.0});
    buffer_.clear();
    rebuild(std::move(points));
}

void TDigest::rebuild(std::vector<Centroid> points) const {
    std::sort(points.begin(), points.end(), [](const Centroid& a, const Centroid& b) {
        return a.mean < b.mean || (a.mean == b.mean && a.weight < b.weight);
    });
    double total = 0.0;
    for (const auto& c : points) total += c.weight;

    std::vector<Centroid> out;
    out.reserve(points.size());
    if (total <= compression_) {
        // Exact regime: only coincident values share a centroid.
        for (const auto& c : points) {
            if (!out.empty() && out.back().mean == c.mean)
                out.back().weight += c.weight;
            else
                out.push_back(c);
        }
    } else {
        double left = 0.0;  // weight strictly before the open centroid
        for (const auto& c : points) {
            if (out.empty()) {
                out.push_back(c);
                continue;
            }
            Centroid& open = out.back();
            const double q_lo = left / total;
            const double q_hi = (left + open.weight + c.weight) / total;
            if (k1(q_hi, compression_) - k1(q_lo, compression_) <= 1.0 || open.mean == c.mean) {
                absorb(open, c);
            } else {
                left += open.weight;
                out.push_back(c);
            }
        }
        // Rounding in the weighted means can produce ties; fold them.
        std::vector<Centroid> strict;
        strict.reserve(out.size());
        for (const auto& c : out) {
            if (!strict.empty() && strict.back().mean >= c.mean)
                absorb(strict.back(), c);
            else
                strict.push_back(c);
        }
        out = std::move(strict);
    }
    centroids_ = std::move(out);
}

const std::vector<TDigest::Centroid>& TDigest::centroids() const {
    flush();
    return centroids_;
}

void TDigest::merge(const TDigest& other) {
    if (other.compression_ != compression_)
        throw ConfigError("t-digest merge: compression mismatch (" + std::to_string(compression_) + " vs " +
                          std::to_string(other.compression_) + ")");
    if (other.empty()) return;
    const auto& mine = centroids();
    const auto& theirs = other.centroids();
    std::vector<Centroid> points;
    points.reserve(mine.size() + theirs.size());
    points.insert(points.end(), mine.begin(), mine.end());
    points.insert(points.end(), theirs.begin(), theirs.end());
    if (empty()) {
        min_ = other.min_;
        max_ = other.max_;
    } else {
        min_ = std::min(min_, other.min_);
        max_ = std::max(max_, other.max_);
    }
    total_weight_ += other.total_weight_;
    rebuild(std::move(points));
}

double TDigest::quantile(double q) const {
    if (!(q >= 0.0 && q <= 1.0)) throw InputError("t-digest quantile: q must lie in [0, 1]");
    if (empty()) throw StateError("t-digest quantile: empty sketch");
    const auto& cs = centroids();
    if (q == 0.0) return min_;
    if (q == 1.0) return max_;
    const double n = total_weight_;
    const double pos = q * (n - 1.0);
    const bool exact = n <= compression_;

    // Each centroid anchors an index interval [lo, hi] on which the estimate
    // equals its mean: the full span for point masses, the centre otherwise.
    // Between anchors the estimate is linear in index position.
    double prev_hi = 0.0;
    double prev_val = min_;
    double start = 0.0;
    for (std::size_t i = 0; i < cs.size(); ++i) {
        const auto& c = cs[i];
        const bool point = exact || c.weight == 1.0;
        const double lo = point ? start : start + (c.weight - 1.0) / 2.0;
        const double hi = point ? start + c.weight - 1.0 : lo;
        if (pos < lo) {
            const double t = (pos - prev_hi) / (lo - prev_hi);
            return (1.0 - t) * prev_val + t * c.mean;
        }
        if (pos <= hi) return c.mean;
        prev_hi = hi;
        prev_val = c.mean;
        start += c.weight;
    }
    const double last = n - 1.0;
    if (pos >= last || last <= prev_hi) return max_;
    const double t = (pos - prev_hi) / (last - prev_hi);
    return (1.0 - t) * prev_val + t * max_;
}

void TDigest::serialize(std::ostream& os) const {
    const auto& cs = centroids();
    binio::write<double>(os, compression_);
    binio::write<std::uint64_t>(os, cs.size());
    for (const auto& c : cs) {
        binio::write<double>(os, c.mean);
        binio::write<double>(os, c.weight);
    }
}

TDigest TDigest::deserialize(std::istream& is) {
    TDigest td(binio::read<double>(is));
    const auto count = binio::read<std::uint64_t>(is);
    if (count > (1ull << 32)) throw DataError("t-digest record: implausible centroid count");
    for (std::uint64_t i = 0; i < count; ++i) {
        const double mean = binio::read<double>(is);
        const double weight = binio::read<double>(is);
        if (!std::isfinite(mean) || !(weight > 0.0)) throw DataError("t-digest record: invalid centroid");
        if (!td.centroids_.empty() && !(td.centroids_.back().mean < mean))
            throw DataError("t-digest record: centroid means not increasing");
        td.centroids_.push_back({mean, weight});
        td.total_weight_ += weight;
    }
    if (!td.centroids_.empty()) {
        td.min_ = td.centroids_.front().mean;
        td.max_ = td.centroids_.back().mean;
    }
    return td;
}

TDigest td_merge(const TDigest& a, const TDigest& b) {
    TDigest out = a;
    out.merge(b);
    return out;
}

}  // namespace genemamba
