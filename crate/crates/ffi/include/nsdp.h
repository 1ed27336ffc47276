#ifndef NSDP_H
#define NSDP_H

/* Generated by cbindgen from the nsdp-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every entry point.
 */
typedef enum {
  NsdpStatus_Ok = 0,
  /**
   * A null pointer, malformed UTF-8 or otherwise unusable argument.
   */
  NsdpStatus_InvalidArgument = 1,
  /**
   * The JSON text did not parse or did not build a model/program.
   */
  NsdpStatus_ParseError = 2,
  /**
   * The model parsed but failed validation or solving.
   */
  NsdpStatus_ModelError = 3,
  /**
   * The queried point carries the infeasibility sentinel.
   */
  NsdpStatus_Infeasible = 4,
  /**
   * At least one audit check failed (the report has details).
   */
  NsdpStatus_CheckFailed = 5,
  /**
   * A panic was caught at the boundary; state is unchanged.
   */
  NsdpStatus_Panic = 6,
} NsdpStatus;

/**
 * The model handle: the parsed model plus the digest of its source bytes.
 */
typedef struct NsdpModel NsdpModel;

/**
 * A solved value table together with the (possibly reduced) model it was
 * solved on.
 */
typedef struct NsdpTable NsdpTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message for this thread, or null when none was recorded.
 * The caller owns the returned string.
 */
char *nsdp_last_error(void);

/**
 * Free a string returned by this library.
 */
void nsdp_string_free(char *text);

/**
 * Parse a model from JSON text into a handle.
 */
NsdpStatus nsdp_model_parse(const char *json, NsdpModel **out_model);

/**
 * Load a model from a file path.
 */
NsdpStatus nsdp_model_load(const char *path, NsdpModel **out_model);

void nsdp_model_free(NsdpModel *model);

/**
 * SHA-256 digest of the model source, as `sha256:<hex>`.
 */
NsdpStatus nsdp_model_digest(const NsdpModel *model, char **out_digest);

/**
 * Solve the Bellman recursion. Negative `epsilon` keeps the model's own
 * truncation epsilon; stochastic models are reduced first.
 */
NsdpStatus nsdp_solve(const NsdpModel *model, double epsilon, NsdpTable **out_table);

void nsdp_table_free(NsdpTable *table);

/**
 * Truncation horizon of a solved table.
 */
NsdpStatus nsdp_table_horizon(const NsdpTable *table, uintptr_t *out_t_eff);

/**
 * Interpolated value of stage `stage` at `point` (length `len`). Infeasible
 * regions report `Infeasible` and leave the output untouched.
 */
NsdpStatus nsdp_table_value(const NsdpTable *table,
                            uintptr_t stage,
                            const double *point,
                            uintptr_t len,
                            double *out_value);

/**
 * Export the table in the same tab-separated format as the CLI.
 */
NsdpStatus nsdp_table_export(const NsdpTable *table, char **out_text);

/**
 * Audit a program (JSON, same format as the CLI) against the model. The
 * machine-readable report lands in `out_report_json`; `CheckFailed` means
 * the report contains at least one failed check.
 */
NsdpStatus nsdp_audit(const NsdpModel *model,
                      const char *program_json,
                      uint64_t seed,
                      char **out_report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NSDP_H */
