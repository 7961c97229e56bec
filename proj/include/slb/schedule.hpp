#pragma once

#include <cstdint>
#include <string>

namespace slb {

enum class ScheduleKind { Linear, Sin, Exp };

ScheduleKind schedule_kind_from_string(const std::string& s);
std::string to_string(ScheduleKind kind);

// Temperature decay over training, in the T = 1/tau convention: T rises
// from t_start to t_end over total_iters steps, so the softmax temperature
// tau = 1/T falls.
struct TemperatureSchedule {
  ScheduleKind kind = ScheduleKind::Exp;
  double t_start = 0.01;
  double t_end = 10.0;
  std::int64_t total_iters = 1;

  void validate() const;
};

struct TemperaturePoint {
  double T = 0.0;
  double tau = 0.0;
};

// Evaluates the schedule at iteration i in [0, total_iters]. Endpoints are
// exact: T(0) == t_start and T(total_iters) == t_end for every kind.
TemperaturePoint temperature_at(const TemperatureSchedule& s, std::int64_t i);

}  // namespace slb
