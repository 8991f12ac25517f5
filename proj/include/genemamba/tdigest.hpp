#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace genemamba {

// Mergeable streaming quantile sketch (merging-buffer t-digest, k1 scale).
//
// Values are appended to an unsorted buffer and folded into the centroid
// list once the buffer fills. While the total weight stays at or below the
// compression parameter no compression happens at all, so every centroid is
// a point mass and quantiles equal the sorted-array answer exactly
// (linear interpolation at position q * (n - 1)).
class TDigest {
public:
    struct Centroid {
        double mean;
        double weight;
        friend bool operator==(const Centroid&, const Centroid&) = default;
    };

    static constexpr double kMinCompression = 20.0;
    static constexpr double kDefaultCompression = 100.0;

    explicit TDigest(double compression = kDefaultCompression);

    void insert(double value);

    // Pools `other` into this sketch. Both must share the same compression.
    void merge(const TDigest& other);

    double quantile(double q) const;

    double compression() const { return compression_; }
    double total_weight() const { return total_weight_; }
    bool empty() const { return total_weight_ == 0.0; }

    // Folds the buffer into the centroid list and returns it.
    const std::vector<Centroid>& centroids() const;

    // Length-prefixed little-endian record: compression (f64), centroid
    // count (u64), then (mean, weight) pairs as f64.
    void serialize(std::ostream& os) const;
    static TDigest deserialize(std::istream& is);

private:
    void flush() const;
    void rebuild(std::vector<Centroid> points) const;

    double compression_;
    double total_weight_ = 0.0;
    double min_ = 0.0;
    double max_ = 0.0;
    mutable std::vector<Centroid> centroids_;
    mutable std::vector<double> buffer_;
};

TDigest td_merge(const TDigest& a, const TDigest& b);

}  // namespace genemamba
