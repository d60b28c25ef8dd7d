#include <atomic>
#include <cstdlib>
#include <string>

#include "p2w/kernels.hpp"

namespace p2w::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(P2W_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa initial_isa() {
  const bool avx2_ok = cpu_has_avx2();
  if (const char* env = std::getenv("P2W_KERNELS")) {
    const std::string v = env;
    if (v == "scalar") return Isa::scalar;
    if (v == "avx2" && avx2_ok) return Isa::avx2;
  }
  return avx2_ok ? Isa::avx2 : Isa::scalar;
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> t{
      initial_isa() == Isa::avx2 ? avx2::table() : &scalar::table()};
  return t;
}

}  // namespace

#if !defined(P2W_HAVE_AVX2)
namespace avx2 {
const KernelTable* table() { return nullptr; }
}  // namespace avx2
#endif

bool isa_available(Isa isa) {
  return isa == Isa::scalar || (cpu_has_avx2() && avx2::table() != nullptr);
}

Isa active_isa() { return current().load()->isa; }

void force_isa(Isa isa) {
  if (!isa_available(isa)) isa = Isa::scalar;
  current().store(isa == Isa::avx2 ? avx2::table() : &scalar::table());
}

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

const KernelTable& active() { return *current().load(); }

}  // namespace p2w::kernels
