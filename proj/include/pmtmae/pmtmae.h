/* SPDX-License-Identifier: Apache-2.0 */
#ifndef PMTMAE_H
#define PMTMAE_H

/*
 * C interface to the pmtmae library.
 *
 * Every function returns a pmt_status. On failure a message describing the
 * error is available from pmt_last_error() on the calling thread until the
 * next call into the library from that thread.
 *
 * Configuration is passed as JSON text holding flat dotted keys (for example
 * {"model.dim": 96, "train.epochs": 20}). NULL or "" means defaults. Strings
 * returned through char** out-parameters are owned by the caller and must be
 * released with pmt_string_free().
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define PMT_API __declspec(dllexport)
#elif defined(PMT_BUILDING_LIBRARY)
#define PMT_API __attribute__((visibility("default")))
#else
#define PMT_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum pmt_status {
  PMT_OK = 0,
  PMT_ERR_USAGE = 1,   /* invalid argument or configuration */
  PMT_ERR_DATA = 2,    /* unreadable, malformed or inconsistent input */
  PMT_ERR_NUMERIC = 3, /* non-finite loss or degenerate numerics */
  PMT_ERR_INTERNAL = 4
} pmt_status;

typedef struct pmt_dataset pmt_dataset;
typedef struct pmt_model pmt_model;
typedef struct pmt_teacher pmt_teacher;

PMT_API const char* pmt_last_error(void);
PMT_API const char* pmt_version(void);
PMT_API void pmt_string_free(char* s);

/* Configuration: defaults <- file (may be NULL) <- overrides JSON. */
PMT_API pmt_status pmt_config_resolve(const char* file, const char* overrides_json, char** out_json);

/* Datasets. split: 0 = train, 1 = test, -1 = all. */
PMT_API pmt_status pmt_dataset_generate(const char* config_json, pmt_dataset** out);
PMT_API pmt_status pmt_dataset_load(const char* dir, pmt_dataset** out);
PMT_API pmt_status pmt_dataset_save(const pmt_dataset* ds, const char* dir);
PMT_API pmt_status pmt_dataset_info(const pmt_dataset* ds, char** out_json);
PMT_API void pmt_dataset_free(pmt_dataset* ds);

/* Models. num_classes 0 takes model.num_classes from the configuration. */
PMT_API pmt_status pmt_model_create(const char* config_json, size_t num_classes, pmt_model** out);
PMT_API pmt_status pmt_model_load(const char* checkpoint_path, pmt_model** out);
PMT_API pmt_status pmt_model_save(const pmt_model* model, const char* checkpoint_path);
PMT_API pmt_status pmt_model_config(const pmt_model* model, char** out_json);
PMT_API pmt_status pmt_model_param_count(const pmt_model* model, uint64_t* out);
PMT_API pmt_status pmt_model_param_hash(const pmt_model* model, uint64_t* out);
PMT_API void pmt_model_free(pmt_model* model);

/* Teacher records: synthesized from a frozen stand-in, or loaded from PMTT. */
PMT_API pmt_status pmt_teacher_make(const pmt_dataset* ds, const char* config_json, pmt_teacher** out);
PMT_API pmt_status pmt_teacher_load(const char* path, pmt_teacher** out);
PMT_API pmt_status pmt_teacher_save(const pmt_teacher* t, const char* path);
PMT_API pmt_status pmt_teacher_info(const pmt_teacher* t, char** out_json);
PMT_API void pmt_teacher_free(pmt_teacher* t);

/*
 * Training. The teacher may be NULL. Epochs already completed by a model
 * resumed from a checkpoint of the same stage are skipped. metric_log and
 * checkpoint_dir may be NULL. The per-epoch metrics are returned as a JSON
 * array when out_json is non-NULL.
 */
PMT_API pmt_status pmt_pretrain(pmt_model* model, const pmt_dataset* ds, const pmt_teacher* teacher,
                                const char* config_json, const char* metric_log, const char* checkpoint_dir,
                                char** out_json);
PMT_API pmt_status pmt_finetune(pmt_model* model, const pmt_dataset* ds, const pmt_teacher* teacher,
                                const char* config_json, const char* metric_log, const char* checkpoint_dir,
                                char** out_json);

/* Accuracy and confusion matrix as JSON. */
PMT_API pmt_status pmt_evaluate(const pmt_model* model, const pmt_dataset* ds, int split, char** out_json);

/* Analyses. Output paths may be NULL to skip writing. */
PMT_API pmt_status pmt_corr_hist(const pmt_model* model, const pmt_dataset* ds, int split, const char* config_json,
                                 const char* jsonl_path, const char* csv_path, char** out_json);
PMT_API pmt_status pmt_export_features(const pmt_model* model, const pmt_dataset* ds, int split, const char* csv_path,
                                       char** out_json);
PMT_API pmt_status pmt_reconstruct(const pmt_model* model, const char* cloud_path, uint64_t seed,
                                   const char* out_path, char** out_json);

/* Finite-difference suite and parameter accounting, as JSON. */
PMT_API pmt_status pmt_grad_check(uint64_t seed, size_t seeds, char** out_json);
PMT_API pmt_status pmt_param_report(const char* config_json, char** out_json);

#ifdef __cplusplus
}
#endif

#endif /* PMTMAE_H */
