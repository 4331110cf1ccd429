#ifndef CISRU_SIM_H
#define CISRU_SIM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CisruStatus {
  CISRU_STATUS_OK = 0,
  CISRU_STATUS_NULL_POINTER = 1,
  CISRU_STATUS_INVALID_UTF8 = 2,
  // Scenario or command JSON that does not parse or validate.
  CISRU_STATUS_PARSE_ERROR = 3,
  CISRU_STATUS_CONFIG_ERROR = 4,
  // The command parsed but the kernel refused it; the reply holds the
  // typed error.
  CISRU_STATUS_COMMAND_REJECTED = 5,
  CISRU_STATUS_KERNEL_ERROR = 6,
  CISRU_STATUS_PANIC = 7,
} CisruStatus;

// Opaque kernel handle.
typedef struct CisruKernel CisruKernel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Builds a kernel from a scenario document.
//
// `config_json` may be null; otherwise it is layered over the scenario's
// own `config`. `seed` may be null to use the scenario's seed. The handle
// is written to `*out` and must be released with [`cisru_kernel_free`].
//
// # Safety
// String arguments must be null or valid NUL-terminated strings; `seed`
// null or readable; `out` writable.
enum CisruStatus cisru_kernel_new(const char *scenario_json,
                                  const char *config_json,
                                  const uint64_t *seed,
                                  struct CisruKernel **out);

// Releases a kernel. Null is ignored.
//
// # Safety
// `k` must be null or a handle from [`cisru_kernel_new`] not yet freed.
void cisru_kernel_free(struct CisruKernel *k);

// Advances the simulation by `ticks` steps.
//
// # Safety
// `k` must be null or a live handle.
enum CisruStatus cisru_kernel_step(struct CisruKernel *k, uint64_t ticks);

// Current tick, or 0 for a null handle.
//
// # Safety
// `k` must be null or a live handle.
uint64_t cisru_kernel_tick(const struct CisruKernel *k);

// Ends the run: final map fusion and the `RunEnd` record. Idempotent.
//
// # Safety
// `k` must be null or a live handle.
enum CisruStatus cisru_kernel_finish(struct CisruKernel *k);

// Moves the records produced since the last call into `*out` as JSON
// Lines, identical to the event log a headless run writes.
//
// # Safety
// `k` must be null or a live handle; `out` writable.
enum CisruStatus cisru_kernel_take_events(struct CisruKernel *k, char **out);

// Writes the current console snapshot as JSON into `*out`.
//
// # Safety
// `k` must be null or a live handle; `out` writable.
enum CisruStatus cisru_kernel_snapshot(const struct CisruKernel *k, char **out);

// Applies an operator command (the `Command` JSON of the console
// protocol). `*reply` receives the ack on `Ok`, or the typed error on
// `CommandRejected`; `reply` may be null when the caller does not need it.
//
// # Safety
// `k` must be null or a live handle; `command_json` a valid string;
// `reply` null or writable.
enum CisruStatus cisru_kernel_apply_command(struct CisruKernel *k,
                                            const char *command_json,
                                            char **reply);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must be null or a string from this library not yet freed.
void cisru_string_free(char *s);

// Message of the last failure on this thread; empty if none. Valid until
// the next failing call on the same thread.
const char *cisru_last_error(void);

// Library version, static.
const char *cisru_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CISRU_SIM_H */
