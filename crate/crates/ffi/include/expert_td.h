#ifndef EXPERT_TD_H
#define EXPERT_TD_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ExtdSynthKind {
  EXTD_SYNTH_KIND_SINE = 0,
  EXTD_SYNTH_KIND_TREND = 1,
  EXTD_SYNTH_KIND_RANDOM_WALK = 2,
  EXTD_SYNTH_KIND_REGIME_SWITCH = 3,
} ExtdSynthKind;

typedef enum ExtdStatus {
  EXTD_STATUS_OK = 0,
  EXTD_STATUS_NULL_POINTER = 1,
  EXTD_STATUS_INVALID_ARGUMENT = 2,
  EXTD_STATUS_IO = 3,
  EXTD_STATUS_PARSE = 4,
  EXTD_STATUS_STATE = 5,
  EXTD_STATUS_NUMERIC = 6,
  EXTD_STATUS_CHECKPOINT = 7,
  EXTD_STATUS_PANIC = 8,
} ExtdStatus;

/**
 * Opaque Q-network checkpoint.
 */
typedef struct ExtdModel ExtdModel;

/**
 * Opaque bar series.
 */
typedef struct ExtdSeries ExtdSeries;

typedef struct ExtdSynthSpec {
  enum ExtdSynthKind kind;
  size_t length;
  double base_price;
  double amplitude;
  double period;
  double drift;
  double volatility;
  size_t bars_per_day;
  uint32_t frequency;
  int64_t start;
  double wick;
  double regime_length;
} ExtdSynthSpec;

typedef struct ExtdMetrics {
  double accumulated_profit;
  double sharpe;
  double sortino;
  size_t steps;
} ExtdMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length in bytes, excluding the terminator.
 */
size_t extd_last_error(char *buf, size_t len);

/**
 * Default synthetic series parameters.
 */
struct ExtdSynthSpec extd_synth_spec_default(void);

/**
 * Loads a bar CSV recorded at `frequency` minutes.
 */
enum ExtdStatus extd_series_load(const char *path, uint32_t frequency, struct ExtdSeries **out);

enum ExtdStatus extd_series_synth(const struct ExtdSynthSpec *spec,
                                  uint64_t seed,
                                  struct ExtdSeries **out);

/**
 * Aggregates into bars of `target_frequency` minutes; `series` is untouched.
 */
enum ExtdStatus extd_series_aggregate(const struct ExtdSeries *series,
                                      uint32_t target_frequency,
                                      struct ExtdSeries **out);

/**
 * Number of bars; 0 for a null handle.
 */
size_t extd_series_len(const struct ExtdSeries *series);

/**
 * Writes the `len` closes into `out`; `len` must equal the series length.
 */
enum ExtdStatus extd_series_closes(const struct ExtdSeries *series, double *out, size_t len);

void extd_series_free(struct ExtdSeries *series);

/**
 * Writes the expert action (-1, 0, 1) for every bar into `out`.
 */
enum ExtdStatus extd_expert_trajectory(const struct ExtdSeries *series, int8_t *out, size_t len);

/**
 * Profit, per-step Sharpe and per-step Sortino of a reward sequence.
 */
enum ExtdStatus extd_metrics(const double *rewards, size_t n, struct ExtdMetrics *out);

/**
 * Sets `*triggered` when `price` breaches the trailing band against
 * `position`.
 */
enum ExtdStatus extd_stop_loss_check(const double *trailing,
                                     size_t n,
                                     int8_t position,
                                     double price,
                                     bool *triggered);

enum ExtdStatus extd_model_load(const char *path, struct ExtdModel **out);

/**
 * Feature count per state row; 0 for a null handle.
 */
size_t extd_model_input_size(const struct ExtdModel *model);

/**
 * State window length the model was trained with; 0 for a null handle.
 */
size_t extd_model_window_len(const struct ExtdModel *model);

/**
 * Q-values for a row-major `rows x cols` state, oldest row first, written
 * to `q_out[0..3]` in the order short, flat, long.
 */
enum ExtdStatus extd_model_forward(const struct ExtdModel *model,
                                   const double *state,
                                   size_t rows,
                                   size_t cols,
                                   double *q_out);

void extd_model_free(struct ExtdModel *model);

/**
 * Backtests a signal baseline (`"buy_and_hold"`, `"macd"` or
 * `"dual_thrust"`, default parameters) over the whole series. `stop_k`
 * of 0 disables the stop-loss.
 */
enum ExtdStatus extd_baseline_backtest(const struct ExtdSeries *series,
                                       const char *strategy,
                                       double cost_rate,
                                       size_t stop_k,
                                       struct ExtdMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EXPERT_TD_H */
