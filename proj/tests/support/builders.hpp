#pragma once

// Small constructors shared by the unit tests.

#include <optional>
#include <string>
#include <vector>

#include "revisebench/core_data.hpp"

namespace revisebench::test_support {

inline ForecastInstance make_instance(const std::vector<double>& history, std::optional<std::vector<double>> truth,
                                      std::optional<std::vector<double>> prior = std::nullopt,
                                      Frequency f = Frequency::daily, Date start = Date::from_ymd(2024, 1, 1),
                                      std::string variable = "var", std::size_t horizon = 0) {
  ForecastInstance inst;
  inst.variable_id = std::move(variable);
  inst.frequency = f;
  const int step = step_days(f);
  for (std::size_t i = 0; i < history.size(); ++i) {
    inst.history.push_back({start + static_cast<std::int64_t>(i) * step, history[i]});
  }
  if (horizon == 0) horizon = truth ? truth->size() : (prior ? prior->size() : 1);
  for (std::size_t t = 0; t < horizon; ++t) {
    inst.horizon_timestamps.push_back(start + static_cast<std::int64_t>(history.size() + t) * step);
  }
  inst.instance_id = inst.variable_id + "@" + inst.forecast_start().iso();
  inst.ground_truth = std::move(truth);
  inst.prior = std::move(prior);
  if (inst.prior) inst.prior_source = "test";
  inst.context = make_context("meta", "cal", "cov", {});
  return inst;
}

}  // namespace revisebench::test_support
