#ifndef VOTACAST_H
#define VOTACAST_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VcStatus {
  VC_STATUS_OK = 0,
  VC_STATUS_NULL_POINTER = 1,
  // Bad arguments, configuration or input files.
  VC_STATUS_INVALID_INPUT = 2,
  VC_STATUS_NO_ELIGIBLE_PARTY = 3,
  VC_STATUS_NUMERICAL = 4,
  // Sampler convergence or importance-weight checks failed.
  VC_STATUS_DIAGNOSTIC = 5,
  VC_STATUS_INTERNAL = 6,
  VC_STATUS_PANIC = 7,
} VcStatus;

// Opaque simulation ensemble.
typedef struct VcEnsemble VcEnsemble;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into the library from the same thread.
const char *vc_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *vc_version(void);

// D'Hondt allocation of `contingent` seats among `n` lists.
//
// # Safety
// `votes` and `seats_out` must point to `n` elements.
enum VcStatus vc_dhondt_allocate(const double *votes,
                                 size_t n,
                                 uint32_t contingent,
                                 double threshold,
                                 uint32_t *seats_out);

// Jefferson allocation; also reports the price per seat.
//
// # Safety
// `votes` and `seats_out` must point to `n` elements; `price_out` may be null.
enum VcStatus vc_jefferson_allocate(const double *votes,
                                    size_t n,
                                    uint32_t contingent,
                                    double threshold,
                                    uint32_t *seats_out,
                                    double *price_out);

// Numerically stable softmax of `n` scores.
//
// # Safety
// `scores` and `out` must point to `n` elements.
enum VcStatus vc_softmax(const double *scores, size_t n, double *out);

// Builds an ensemble from `draws x provinces x parties` local shares,
// row-major. The last party label is the pivot.
//
// # Safety
// `parties` must hold `n_parties` NUL-terminated strings, `provinces` and
// `electorate` `n_provinces` elements, `local` `n_local` elements. `out`
// receives a handle to release with `vc_ensemble_free`.
enum VcStatus vc_ensemble_new(const char *const *parties,
                              size_t n_parties,
                              const uint32_t *provinces,
                              const double *electorate,
                              size_t n_provinces,
                              const double *local,
                              size_t n_local,
                              struct VcEnsemble **out);

// Releases an ensemble. Null is ignored.
//
// # Safety
// `ensemble` must come from `vc_ensemble_new` and not be used afterwards.
void vc_ensemble_free(struct VcEnsemble *ensemble);

// Number of draws.
//
// # Safety
// `ensemble` must be a live handle; `len_out` must be writable.
enum VcStatus vc_ensemble_len(const struct VcEnsemble *ensemble, size_t *len_out);

// Sets unnormalized log weights, one per draw, and reports the ESS.
//
// # Safety
// `log_weights` must point to `n` elements; `ess_out` may be null.
enum VcStatus vc_ensemble_set_log_weights(struct VcEnsemble *ensemble,
                                          const double *log_weights,
                                          size_t n,
                                          double ess_floor,
                                          double *ess_out);

// Effective sample size of the current weights.
//
// # Safety
// `ensemble` must be a live handle; `ess_out` must be writable.
enum VcStatus vc_ensemble_ess(const struct VcEnsemble *ensemble, double *ess_out);

// Weighted mean national shares, one per party.
//
// # Safety
// `out` must point to `n_parties` elements.
enum VcStatus vc_ensemble_weighted_mean(const struct VcEnsemble *ensemble,
                                        double *out,
                                        size_t n_parties);

// Runs every stage for the configuration file at `config_path`. A nonzero
// `use_seed` overrides the configured seed with `seed`.
//
// # Safety
// `config_path` must be a NUL-terminated string.
enum VcStatus vc_run_pipeline(const char *config_path, uint64_t seed, int32_t use_seed);

// Runs one stage by its command-line name, e.g. `fit-polls`.
//
// # Safety
// `config_path` and `stage` must be NUL-terminated strings.
enum VcStatus vc_run_stage(const char *config_path,
                           const char *stage,
                           uint64_t seed,
                           int32_t use_seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOTACAST_H */
