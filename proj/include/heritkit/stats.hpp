#pragma once

#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/normal.hpp>

namespace heritkit::stats {

inline double normal_quantile(double p) {
  boost::math::normal_distribution<double> dist(0.0, 1.0);
  return boost::math::quantile(dist, p);
}

inline double f_cdf(double x, double df1, double df2) {
  if (x <= 0.0) return 0.0;
  boost::math::fisher_f_distribution<double> dist(df1, df2);
  return boost::math::cdf(dist, x);
}

inline double f_sf(double x, double df1, double df2) {
  if (x <= 0.0) return 1.0;
  boost::math::fisher_f_distribution<double> dist(df1, df2);
  return boost::math::cdf(boost::math::complement(dist, x));
}

inline double f_quantile(double p, double df1, double df2) {
  boost::math::fisher_f_distribution<double> dist(df1, df2);
  return boost::math::quantile(dist, p);
}

}  // namespace heritkit::stats
