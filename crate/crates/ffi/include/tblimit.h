#ifndef TBLIMIT_H
#define TBLIMIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bravais lattice family.
 */
typedef enum TbLattice {
  TB_LATTICE_CHAIN = 0,
  TB_LATTICE_SQUARE = 1,
  TB_LATTICE_TRIANGULAR = 2,
} TbLattice;

/**
 * Quantity of interest.
 */
typedef enum TbQoi {
  TB_QOI_HELMHOLTZ = 0,
  TB_QOI_GRAND = 1,
  TB_QOI_NUMBER = 2,
} TbQoi;

/**
 * Status codes of every fallible call.
 */
typedef enum TbStatus {
  TB_STATUS_OK = 0,
  TB_STATUS_NULL_POINTER = 1,
  TB_STATUS_INVALID_ARGUMENT = 2,
  TB_STATUS_INDEX_OUT_OF_RANGE = 3,
  TB_STATUS_SOLVER_FAILURE = 4,
  TB_STATUS_NUMERICAL_FAILURE = 5,
  TB_STATUS_PANIC = 6,
} TbStatus;

/**
 * Finite cluster with its Hamiltonian diagonalised.
 */
typedef struct TbSystem TbSystem;

/**
 * Model parameters; the spin factor is fixed at 2.
 */
typedef struct TbParams {
  double r0;
  double t0;
  double q_hop;
  double q_rho;
  double eps0;
  double c1;
  double rc;
  double beta;
  double m_accum;
} TbParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *tb_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tb_version(void);

/**
 * Default model parameters.
 */
struct TbParams tb_params_default(void);

/**
 * Relaxation parameters with the stress-free on-site slope for a lattice.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `TbParams`.
 */
enum TbStatus tb_params_relaxation(enum TbLattice kind, double spacing, struct TbParams *out);

/**
 * Homogeneous Fermi level by Bloch quadrature.
 *
 * # Safety
 * `params` must be null or valid; `out` must be null or writable.
 */
enum TbStatus tb_fermi_level_bloch(const struct TbParams *params,
                                   enum TbLattice kind,
                                   double spacing,
                                   double *out);

/**
 * Builds an open cluster from `n_sites` positions stored as `x y z` triples.
 *
 * # Safety
 * `positions` must hold `3 n_sites` doubles; `params` must be valid;
 * `out` must be writable. The handle is released with [`tb_system_free`].
 */
enum TbStatus tb_system_new(const double *positions,
                            uintptr_t n_sites,
                            const struct TbParams *params,
                            struct TbSystem **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `system` must be null or a handle from [`tb_system_new`] not yet freed.
 */
void tb_system_free(struct TbSystem *system);

/**
 * Number of sites, or 0 for a null handle.
 *
 * # Safety
 * `system` must be null or a live handle.
 */
uintptr_t tb_system_len(const struct TbSystem *system);

/**
 * Chemical potential for `ne` electrons.
 *
 * # Safety
 * `system` must be a live handle and `out` writable.
 */
enum TbStatus tb_system_solve_mu(const struct TbSystem *system, double ne, double *out);

/**
 * Total quantity of interest at chemical potential `tau`.
 *
 * # Safety
 * `system` must be a live handle and `out` writable.
 */
enum TbStatus tb_system_total(const struct TbSystem *system,
                              enum TbQoi kind,
                              double tau,
                              double *out);

/**
 * Site-local quantity of interest.
 *
 * # Safety
 * `system` must be a live handle and `out` writable.
 */
enum TbStatus tb_system_local(const struct TbSystem *system,
                              uintptr_t site,
                              enum TbQoi kind,
                              double tau,
                              double *out);

/**
 * Forces `-dG/dy` at fixed `tau`, written as `x y z` triples into `out`,
 * which must hold `len >= 3 n_sites` doubles.
 *
 * # Safety
 * `system` must be a live handle and `out` writable for `len` doubles.
 */
enum TbStatus tb_system_forces(const struct TbSystem *system,
                               double tau,
                               double *out,
                               uintptr_t len);

/**
 * Canonical forces `-dE/dy` for `ne` electrons; the chemical potential is
 * written to `mu_out` when it is not null.
 *
 * # Safety
 * `system` must be a live handle, `out` writable for `len` doubles and
 * `mu_out` null or writable.
 */
enum TbStatus tb_system_canonical_forces(const struct TbSystem *system,
                                         double ne,
                                         double *out,
                                         uintptr_t len,
                                         double *mu_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TBLIMIT_H */
