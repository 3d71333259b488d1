#pragma once

#include <functional>

namespace amimic {

/// Calls body(i) for i in [0, count) on up to `jobs` threads. Work is handed
/// out by index, so results stored by index do not depend on `jobs`. The
/// first exception thrown by any call is rethrown after all workers finish.
void parallel_for(int count, int jobs, const std::function<void(int)>& body);

}  // namespace amimic
