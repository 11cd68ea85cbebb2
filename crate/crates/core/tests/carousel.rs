mod oracles;

use std::collections::BTreeMap;
use std::time::Duration;

use dds_core::backends::{ClockConfig, ComputeSimConfig, Scenario, TapeSimConfig};
use dds_core::carousel::{compare_policies, run_scenario, CarouselMetrics, CarouselPolicy, Granularity};
use dds_core::clock::secs;
use dds_core::store::RequestStatus;
use oracles::carousel::{self as oracle, Farm};
use proptest::prelude::*;

const GB: u64 = 1_000_000_000;

fn three_files(timeout: Option<f64>) -> Scenario {
    let mut compute = ComputeSimConfig::new(1, 1.0);
    compute.input_wait_timeout = timeout;
    compute.resubmit_delay = 1.0;
    Scenario {
        tape: TapeSimConfig::explicit("tape", "raw", &[("f1", GB, 1.0), ("f2", GB, 2.0), ("f3", GB, 3.0)]),
        compute,
        clock: ClockConfig::default(),
    }
}

fn run(s: &Scenario, p: CarouselPolicy) -> dds_core::carousel::CarouselRun {
    run_scenario(s, &p, Duration::ZERO).unwrap()
}

#[test]
fn file_level_three_files_hand_trace() {
    // f1 runs 1-2, f2 2-3, f3 3-4; each file leaves disk as the next lands.
    let r = run(&three_files(Some(1.0)), CarouselPolicy::file_level());
    assert_eq!(r.request_status, RequestStatus::Finished);
    assert_eq!(r.metrics.attempts_histogram, BTreeMap::from([(1, 3)]));
    assert_eq!(r.metrics.peak_disk_bytes, GB);
    assert_eq!(r.metrics.time_to_first_processing, 1_000);
    assert_eq!(r.metrics.makespan, 4_000);
    assert_eq!(r.metrics.disk_byte_seconds, 3 * GB);
}

#[test]
fn dataset_level_three_files_hand_trace() {
    // All jobs start at 0 and time out at 1. Retries at 2: f1 and f2 are on
    // disk (run 2-3, 3-4); f3 lands at 3, not before the 3 s deadline, so a
    // third attempt starts at 4 and runs 4-5. Disk held until 5.
    let r = run(&three_files(Some(1.0)), CarouselPolicy::dataset_level());
    assert_eq!(r.request_status, RequestStatus::Finished);
    assert_eq!(r.metrics.attempts_histogram, BTreeMap::from([(2, 2), (3, 1)]));
    assert_eq!(r.metrics.peak_disk_bytes, 3 * GB);
    assert_eq!(r.metrics.makespan, 5_000);
    assert_eq!(r.metrics.time_to_first_processing, 2_000);
    assert_eq!(r.metrics.disk_byte_seconds, (4 + 3 + 2) * GB);
}

#[test]
fn file_level_without_prompt_release_holds_the_cache() {
    let r = run(&three_files(None), CarouselPolicy::file_level().with_prompt_release(false));
    assert_eq!(r.metrics.peak_disk_bytes, 3 * GB);
    assert_eq!(r.metrics.attempts_histogram, BTreeMap::from([(1, 3)]));
}

#[test]
fn bundles_wait_for_a_full_set() {
    // Bundles of 2: f1+f2 released at 2 (2 s of work), f3 alone at 3.
    let r = run(&three_files(None), CarouselPolicy::file_level().with_bundle_size(2));
    assert_eq!(r.metrics.attempts_histogram, BTreeMap::from([(1, 3)]));
    assert_eq!(r.metrics.time_to_first_processing, 2_000);
    assert_eq!(r.metrics.makespan, 5_000);
}

#[test]
fn empty_dataset_has_zero_metrics() {
    let mut s = three_files(None);
    s.tape.files.clear();
    for p in [CarouselPolicy::file_level(), CarouselPolicy::dataset_level()] {
        let r = run(&s, p);
        assert_eq!(r.metrics, CarouselMetrics::default());
        assert_eq!(r.bytes_staged, 0);
    }
}

#[test]
fn compare_three_file_policies() {
    let c = compare_policies(
        &three_files(Some(1.0)),
        &[CarouselPolicy::dataset_level(), CarouselPolicy::file_level()],
    )
    .unwrap();
    assert!(c.runs[0].metrics.mean_attempts() > 1.0);
    assert_eq!(c.runs[1].metrics.mean_attempts(), 1.0);
    let r = c.ratios(1);
    assert!((r.peak_disk - 1.0 / 3.0).abs() < 1e-12);
    assert!(r.mean_attempts < 1.0);
    let csv = c.to_csv();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("file-level,3,1.0000,1000000000,"));
    assert!(c.histogram_csv().contains("dataset-level,3,1\n"));
    assert!(c.occupancy_csv().contains("file-level,4.000,0\n"));
}

#[test]
fn identical_policies_have_unit_ratios() {
    let p = CarouselPolicy::file_level();
    let c = compare_policies(&three_files(Some(1.0)), &[p, p]).unwrap();
    let r = c.ratios(1);
    assert_eq!((r.peak_disk, r.mean_attempts, r.disk_byte_seconds), (1.0, 1.0, 1.0));
    assert!(compare_policies(&three_files(None), &[p]).is_err());
}

#[test]
fn policy_names_round_trip() {
    for text in ["file-level", "dataset-level", "file-level:bundle4", "file-level:keep", "file-level:bundle2:keep"] {
        let p: CarouselPolicy = text.parse().unwrap();
        assert_eq!(p.to_string(), text);
    }
    assert!("dataset-level:keep".parse::<CarouselPolicy>().is_err());
    assert!("file-level:bundle0".parse::<CarouselPolicy>().is_err());
    assert!("tape".parse::<CarouselPolicy>().is_err());
    let p: CarouselPolicy = "dataset-level".parse().unwrap();
    assert_eq!(p.granularity, Granularity::DatasetLevel);
}

#[test]
fn runs_are_deterministic() {
    let mut s = three_files(Some(1.0));
    s.tape = TapeSimConfig::uniform("tape", "raw", 40, 10, 5.0, 9);
    s.compute.workers = 3;
    s.compute.failure_rate = 0.2;
    s.compute.seed = 4;
    for p in [CarouselPolicy::file_level(), CarouselPolicy::dataset_level()] {
        assert_eq!(run(&s, p), run(&s, p));
    }
}

#[test]
fn seeded_failures_count_as_attempts_and_bytes_are_conserved() {
    let mut s = three_files(None);
    s.tape = TapeSimConfig::uniform("tape", "raw", 30, 7, 4.0, 2);
    s.compute.failure_rate = 0.4;
    s.compute.max_attempts = 2;
    s.compute.seed = 1;
    let r = run(&s, CarouselPolicy::file_level());
    assert!(r.metrics.attempts_histogram.keys().any(|&a| a > 1));
    assert!(r.bytes_abandoned > 0);
    assert_eq!(r.bytes_staged, r.bytes_processed + r.bytes_abandoned);
    assert_eq!(r.metrics.jobs(), 30);
}

#[test]
fn real_time_mode_runs_the_same_scenario() {
    let mut s = three_files(None);
    s.tape = TapeSimConfig::explicit("tape", "raw", &[("f1", 5, 0.05), ("f2", 5, 0.1)]);
    s.compute.per_file_processing_time = 0.05;
    s.clock.mode = dds_core::backends::ClockMode::Real;
    s.clock.tick = 0.01;
    let r = run_scenario(&s, &CarouselPolicy::file_level(), Duration::from_secs(20)).unwrap();
    assert_eq!(r.request_status, RequestStatus::Finished);
    assert_eq!(r.metrics.attempts_histogram, BTreeMap::from([(1, 2)]));
    assert_eq!(r.bytes_processed, 10);
}

fn farm(s: &Scenario) -> Farm {
    Farm {
        workers: s.compute.workers as usize,
        proc_ms: secs(s.compute.per_file_processing_time),
        timeout_ms: s.compute.input_wait_timeout.map(secs),
        resubmit_ms: secs(s.compute.resubmit_delay),
        max_attempts: s.compute.max_attempts,
    }
}

fn scenario_strategy() -> impl Strategy<Value = Scenario> {
    (
        prop::collection::vec((1u64..50, 0u32..80), 1..9),
        1u32..4,
        1u32..30,
        prop::option::of(5u32..40),
    )
        .prop_map(|(files, workers, proc_tenths, timeout)| {
            let named: Vec<(String, u64, f64)> = files
                .iter()
                .enumerate()
                .map(|(i, (size, t))| (format!("f{i}"), *size, *t as f64 / 10.0))
                .collect();
            let refs: Vec<(&str, u64, f64)> = named.iter().map(|(n, s, t)| (n.as_str(), *s, *t)).collect();
            let mut compute = ComputeSimConfig::new(workers, proc_tenths as f64 / 10.0);
            compute.input_wait_timeout = timeout.map(|t| t as f64 / 10.0);
            compute.max_attempts = 20;
            Scenario {
                tape: TapeSimConfig::explicit("tape", "raw", &refs),
                compute,
                clock: ClockConfig::default(),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn file_level_matches_oracle_and_dominates(s in scenario_strategy()) {
        let stage = s.tape.stage_times();
        let sizes: Vec<u64> = s.tape.files.iter().map(|f| f.size_bytes).collect();
        let f = farm(&s);

        let fine = run(&s, CarouselPolicy::file_level());
        let expect = oracle::file_level(&stage, &f, true);
        prop_assert!(fine.metrics.attempts_histogram.keys().all(|&a| a == 1));
        prop_assert_eq!(fine.metrics.makespan, oracle::makespan(&expect));
        prop_assert_eq!(fine.metrics.peak_disk_bytes, oracle::peak(&stage, &sizes, &expect));
        prop_assert_eq!(fine.metrics.disk_byte_seconds, oracle::byte_seconds(&stage, &sizes, &expect));

        let coarse = run(&s, CarouselPolicy::dataset_level());
        let base = oracle::dataset_level(&stage, &f);
        let mut hist = BTreeMap::new();
        for a in &base.attempts {
            *hist.entry(*a).or_insert(0u64) += 1;
        }
        prop_assert_eq!(&coarse.metrics.attempts_histogram, &hist);
        prop_assert_eq!(coarse.metrics.peak_disk_bytes, oracle::peak(&stage, &sizes, &base));

        prop_assert!(fine.metrics.peak_disk_bytes <= coarse.metrics.peak_disk_bytes);
        for r in [&fine, &coarse] {
            prop_assert_eq!(r.bytes_staged, r.bytes_processed + r.bytes_abandoned);
            prop_assert!(r.metrics.peak_disk_bytes <= sizes.iter().sum::<u64>());
            prop_assert_eq!(r.metrics.jobs(), sizes.len() as u64);
        }
    }
}
