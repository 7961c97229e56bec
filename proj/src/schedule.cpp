#include "slb/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace slb {

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "sin") return ScheduleKind::Sin;
  if (s == "exp") return ScheduleKind::Exp;
  throw std::invalid_argument("schedule: unknown kind '" + s + "' (expected linear|sin|exp)");
}

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::Linear: return "linear";
    case ScheduleKind::Sin: return "sin";
    case ScheduleKind::Exp: return "exp";
  }
  return "?";
}

void TemperatureSchedule::validate() const {
  if (!(t_start > 0.0) || !(t_end > t_start)) {
    throw std::invalid_argument("schedule: requires 0 < t_start < t_end, got t_start=" +
                                std::to_string(t_start) + " t_end=" + std::to_string(t_end));
  }
  if (total_iters < 1) {
    throw std::invalid_argument("schedule: total_iters must be >= 1, got " +
                                std::to_string(total_iters));
  }
}

TemperaturePoint temperature_at(const TemperatureSchedule& s, std::int64_t i) {
  s.validate();
  if (i < 0 || i > s.total_iters) {
    throw std::invalid_argument("schedule: iteration " + std::to_string(i) +
                                " outside [0, " + std::to_string(s.total_iters) + "]");
  }
  double T;
  if (i == 0) {
    T = s.t_start;
  } else if (i == s.total_iters) {
    T = s.t_end;
  } else {
    const double frac = static_cast<double>(i) / static_cast<double>(s.total_iters);
    switch (s.kind) {
      case ScheduleKind::Linear:
        T = s.t_start + frac * (s.t_end - s.t_start);
        break;
      case ScheduleKind::Sin:
        T = s.t_start + std::sin(frac * 3.14159265358979323846 / 2.0) * (s.t_end - s.t_start);
        break;
      case ScheduleKind::Exp:
      default:
        T = s.t_start * std::pow(s.t_end / s.t_start, frac);
        break;
    }
  }
  return {T, 1.0 / T};
}

}  // namespace slb
