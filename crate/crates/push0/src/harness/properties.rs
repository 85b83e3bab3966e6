//! Randomized property suites: seeded schedule generators hammer the bus
//! and collector engines single-threaded, where every interleaving is
//! reproducible from the case number.
//!
//! Three properties, each run for hundreds to thousands of cases:
//! starvation freedom (every published message is delivered exactly once to
//! its group, whatever the priorities and claim order), barrier locality
//! (each group completes on exactly the collector that owns its partition),
//! and routing continuity (a mid-run scale-down loses no group and splits
//! none).

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::bus::{Bus, BusOptions, ConsumerHandle, QueueConfig};
use crate::collector::{
    partition_subject, CollectorCore, CollectorOptions, PartitionPlan, RoutingState,
};
use crate::harness::report::{ExperimentReport, RunRecord};
use crate::harness::rng;
use crate::payload::Payload;

/// A quiet bus for lockstep schedules: no sweeper thread, redelivery only
/// when the test calls for it.
fn manual_bus(ack: Duration) -> Bus {
    Bus::open(BusOptions::in_memory().manual_sweep().ack_timeout(ack))
        .expect("in-memory bus")
}

fn publish(bus: &Bus, subject: &str, payload: Payload) {
    bus.publish(subject, payload, Default::default())
        .expect("publish");
}

/// Shared scaffolding: run `case` over `cases` seeds, count failures, and
/// fold the first counterexample into the verdict.
fn run_suite(
    name: &str,
    property: &str,
    cases: u64,
    seed: u64,
    mut case: impl FnMut(u64) -> Result<(), String>,
) -> ExperimentReport {
    let t_start = Instant::now();
    let mut report = ExperimentReport::new(name)
        .param("cases", cases)
        .param("seed", seed);
    let mut failures = 0u64;
    let mut first_failure = None;
    for i in 0..cases {
        if let Err(e) = case(seed.wrapping_mul(0x9e37_79b9).wrapping_add(i)) {
            failures += 1;
            first_failure.get_or_insert(format!("case {i}: {e}"));
        }
    }
    report.runs.push(
        RunRecord::new(name)
            .value("cases", cases as f64)
            .value("failures", failures as f64),
    );
    report.summary.completed = Some(cases - failures);
    report.summary.total = Some(cases);
    report.check(
        property,
        failures == 0,
        match first_failure {
            None => format!("0 failures across {cases} cases"),
            Some(f) => format!("{failures} failures; first: {f}"),
        },
    );
    report.elapsed_s = t_start.elapsed().as_secs_f64();
    report
}

// ---------------------------------------------------------------------------
// Starvation freedom
// ---------------------------------------------------------------------------

/// Random message mixes — priorities included — through a random consumer
/// fleet under a random claim/ack interleaving: every published message is
/// delivered exactly once to the group, no matter how the priorities skew.
pub fn prop_starvation_freedom(cases: u64, seed: u64) -> ExperimentReport {
    run_suite(
        "prop_starvation_freedom",
        "every published message is delivered exactly once",
        cases,
        seed,
        |case_seed| {
            let mut r = rng(case_seed);
            let bus = manual_bus(Duration::from_secs(30));
            let mut config = QueueConfig::new("q");
            if r.gen_bool(0.5) {
                config = config.priority("prio");
            }
            bus.ensure_queue(config).map_err(|e| e.to_string())?;

            let n = r.gen_range(1..=40u64);
            let consumers: Vec<_> = (0..r.gen_range(1..=3u32))
                .map(|_| {
                    bus.consumer(
                        ConsumerHandle::new("q")
                            .group("g")
                            .inflight_window(r.gen_range(1..=8)),
                    )
                    .expect("consumer")
                })
                .collect();

            let mut published = 0u64;
            let mut pending: Vec<(usize, crate::bus::Delivery)> = Vec::new();
            let mut delivered = std::collections::HashMap::<String, u64>::new();
            // Random interleaving of publish / claim / ack until everything
            // is out; then drain.
            while published < n || !pending.is_empty() || {
                let done: u64 = delivered.values().sum();
                done < n
            } {
                match r.gen_range(0..3u32) {
                    0 if published < n => {
                        publish(
                            &bus,
                            "q",
                            Payload::new()
                                .with("task_id", format!("m{published}"))
                                .with("prio", r.gen_range(0..5i64))
                                .with("block_num", published as i64),
                        );
                        published += 1;
                    }
                    1 => {
                        let c = r.gen_range(0..consumers.len());
                        if let Ok(Some(d)) = consumers[c].try_next() {
                            let id = d.envelope.payload.task_id().unwrap_or("").to_string();
                            *delivered.entry(id).or_insert(0) += 1;
                            pending.push((c, d));
                        }
                    }
                    _ if !pending.is_empty() => {
                        let i = r.gen_range(0..pending.len());
                        let (c, d) = pending.swap_remove(i);
                        consumers[c].ack(&d).map_err(|e| e.to_string())?;
                    }
                    _ => {}
                }
            }

            if delivered.len() as u64 != n {
                return Err(format!("{} of {n} messages delivered", delivered.len()));
            }
            if let Some((id, &count)) = delivered.iter().find(|(_, &c)| c != 1) {
                return Err(format!("{id} delivered {count} times"));
            }
            Ok(())
        },
    )
}

// ---------------------------------------------------------------------------
// Barrier locality
// ---------------------------------------------------------------------------

/// Random fleet shapes and member shuffles through partition-affine routing:
/// every group completes exactly once, on exactly the collector that owns
/// its partition, with nothing rejected or dropped.
pub fn prop_barrier_locality(cases: u64, seed: u64) -> ExperimentReport {
    run_suite(
        "prop_barrier_locality",
        "each group completes on exactly its owning collector",
        cases,
        seed,
        |case_seed| {
            let mut r = rng(case_seed);
            let c = r.gen_range(2..=5u32);
            let k = r.gen_range(2..=4u32);
            let groups = r.gen_range(5..=30u64);

            let bus = manual_bus(Duration::from_secs(30));
            for p in 0..c {
                bus.ensure_queue(QueueConfig::new(partition_subject("mem", p)))
                    .map_err(|e| e.to_string())?;
            }
            bus.ensure_queue(QueueConfig::new("bar"))
                .map_err(|e| e.to_string())?;

            let routing = Arc::new(RoutingState::new(c));
            let mut cores: Vec<CollectorCore> = (0..c)
                .map(|i| {
                    CollectorCore::new(
                        &bus,
                        CollectorOptions::new("loc", "mem", "bar")
                            .inputs(k as u64)
                            .grouping("block_num")
                            .timeout(Duration::from_secs(300))
                            .window(4096)
                            .partitioned(PartitionPlan {
                                index: i,
                                routing: routing.clone(),
                            }),
                    )
                    .expect("core")
                })
                .collect();

            let mut plan: Vec<Payload> = (0..groups)
                .flat_map(|g| {
                    (0..k).map(move |t| {
                        Payload::new()
                            .with("block_num", g as i64)
                            .with("task_index", t as i64)
                            .with("task_id", format!("g{g}-t{t}"))
                    })
                })
                .collect();
            plan.shuffle(&mut r);
            for p in plan {
                let part = (p.get_int("block_num").unwrap() as u64 % c as u64) as u32;
                publish(&bus, &partition_subject("mem", part), p);
            }

            // Round-robin the engines, random starting order each sweep,
            // until nothing moves.
            let mut order: Vec<usize> = (0..c as usize).collect();
            loop {
                order.shuffle(&mut r);
                let mut progressed = false;
                for &i in &order {
                    progressed |= cores[i].poll();
                }
                if !progressed {
                    break;
                }
            }

            let total: u64 = cores.iter().map(|c| c.stats().barriers).sum();
            if total != groups {
                return Err(format!("{total} of {groups} barriers completed"));
            }
            for (i, core) in cores.iter().enumerate() {
                let s = core.stats();
                let owned = (0..groups).filter(|g| g % c as u64 == i as u64).count() as u64;
                if s.barriers != owned {
                    return Err(format!(
                        "collector {i} emitted {} barriers, owns {owned} groups",
                        s.barriers
                    ));
                }
                if s.rejected != 0 || s.duplicate_drops != 0 || s.skipped != 0 {
                    return Err(format!(
                        "collector {i} saw rejects/drops: {s:?}"
                    ));
                }
            }
            let resident = bus
                .stream_state("bar")
                .map(|s| s.depth as u64)
                .map_err(|e| e.to_string())?;
            if resident != groups {
                return Err(format!("{resident} barrier emissions for {groups} groups"));
            }
            Ok(())
        },
    )
}

// ---------------------------------------------------------------------------
// Routing continuity under scale-down
// ---------------------------------------------------------------------------

/// Scale a 4-collector fleet down to 2 with work in flight and half the
/// members still unpublished: retirees abandon their buffers, leases lapse,
/// survivors adopt the orphaned partitions, and every group still completes
/// exactly once — none lost, none split, none rejected.
pub fn prop_routing_continuity(cases: u64, seed: u64) -> ExperimentReport {
    const ORIGINAL: u32 = 4;
    const ACK: Duration = Duration::from_millis(8);
    run_suite(
        "prop_routing_continuity",
        "scale-down loses no group and splits none",
        cases,
        seed,
        |case_seed| {
            let mut r = rng(case_seed);
            let k = r.gen_range(2..=3u32);
            let groups = r.gen_range(8..=24u64);

            let bus = manual_bus(ACK);
            for p in 0..ORIGINAL {
                bus.ensure_queue(QueueConfig::new(partition_subject("mem", p)))
                    .map_err(|e| e.to_string())?;
            }
            bus.ensure_queue(QueueConfig::new("bar"))
                .map_err(|e| e.to_string())?;

            let routing = Arc::new(RoutingState::new(ORIGINAL));
            let mut cores: Vec<CollectorCore> = (0..ORIGINAL)
                .map(|i| {
                    CollectorCore::new(
                        &bus,
                        CollectorOptions::new("cont", "mem", "bar")
                            .inputs(k as u64)
                            .grouping("block_num")
                            .timeout(Duration::from_secs(300))
                            .window(4096)
                            .partitioned(PartitionPlan {
                                index: i,
                                routing: routing.clone(),
                            }),
                    )
                    .expect("core")
                })
                .collect();

            // Producers keep addressing the original four partitions the
            // whole time; dual-accept on the survivors absorbs the stale map.
            let mut plan: Vec<Payload> = (0..groups)
                .flat_map(|g| {
                    (0..k).map(move |t| {
                        Payload::new()
                            .with("block_num", g as i64)
                            .with("task_index", t as i64)
                            .with("task_id", format!("g{g}-t{t}"))
                    })
                })
                .collect();
            plan.shuffle(&mut r);
            let second_half = plan.split_off(plan.len() / 2);
            for p in plan {
                let part = (p.get_int("block_num").unwrap() as u64 % ORIGINAL as u64) as u32;
                publish(&bus, &partition_subject("mem", part), p);
            }

            // Partial progress before the fleet shrinks.
            for _ in 0..r.gen_range(0..6u32) {
                for core in cores.iter_mut() {
                    core.poll();
                }
            }

            routing.scale_to(2);
            let mut survivors = Vec::new();
            let mut pre_scale_barriers = 0u64;
            for (i, mut core) in cores.into_iter().enumerate() {
                if core.survives_rebalance() {
                    survivors.push(core);
                } else {
                    core.drain(Some(Duration::from_millis(1)));
                    let s = core.stats();
                    if s.rejected != 0 {
                        return Err(format!("retiree {i} rejected {} members", s.rejected));
                    }
                    pre_scale_barriers += s.barriers;
                }
            }
            if survivors.len() != 2 {
                return Err(format!("{} survivors, wanted 2", survivors.len()));
            }

            // Let the abandoned leases lapse, hand them back, and land the
            // rest of the workload on the old addresses.
            std::thread::sleep(ACK + Duration::from_millis(2));
            bus.redelivery_sweep();
            for p in second_half {
                let part = (p.get_int("block_num").unwrap() as u64 % ORIGINAL as u64) as u32;
                publish(&bus, &partition_subject("mem", part), p);
            }

            let deadline = Instant::now() + Duration::from_secs(5);
            loop {
                let mut progressed = false;
                for core in survivors.iter_mut() {
                    progressed |= core.poll();
                }
                let total: u64 =
                    pre_scale_barriers + survivors.iter().map(|c| c.stats().barriers).sum::<u64>();
                if total >= groups {
                    break;
                }
                if Instant::now() > deadline {
                    return Err(format!("{total} of {groups} barriers after scale-down"));
                }
                if !progressed {
                    bus.redelivery_sweep();
                    std::thread::sleep(Duration::from_millis(1));
                }
            }

            for (i, core) in survivors.iter().enumerate() {
                let s = core.stats();
                if s.rejected != 0 {
                    return Err(format!("survivor {i} rejected {} members", s.rejected));
                }
                // A drop or skip here would mean a member of an
                // already-finished group came back — a group served twice.
                if s.duplicate_drops != 0 || s.skipped != 0 {
                    return Err(format!(
                        "survivor {i} absorbed stragglers of finished groups: {s:?}"
                    ));
                }
            }
            let total: u64 =
                pre_scale_barriers + survivors.iter().map(|c| c.stats().barriers).sum::<u64>();
            if total != groups {
                return Err(format!("{total} barriers for {groups} groups"));
            }
            let resident = bus
                .stream_state("bar")
                .map(|s| s.depth as u64)
                .map_err(|e| e.to_string())?;
            if resident != groups {
                return Err(format!("{resident} emissions for {groups} groups — a split"));
            }
            Ok(())
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starvation_freedom_holds_across_many_schedules() {
        let report = prop_starvation_freedom(120, 41);
        assert!(report.passed(), "{}", report.verdict_lines());
    }

    #[test]
    fn barrier_locality_holds_across_many_fleets() {
        let report = prop_barrier_locality(120, 42);
        assert!(report.passed(), "{}", report.verdict_lines());
    }

    #[test]
    fn routing_continuity_survives_scale_down() {
        let report = prop_routing_continuity(80, 43);
        assert!(report.passed(), "{}", report.verdict_lines());
    }
}
