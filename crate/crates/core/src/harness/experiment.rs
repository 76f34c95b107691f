use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::report::RunReport;
use super::train::Trainer;
use crate::data::{build_permuted, build_split, Mnist, Protocol, TaskStream};
use crate::error::Result;

/// Task stream a configuration trains on. Permutations follow the run seed.
pub fn build_stream(config: &RunConfig, mnist: &Mnist) -> Result<TaskStream> {
    match config.protocol {
        Protocol::Split => build_split(mnist),
        Protocol::Permuted => build_permuted(mnist, config.n_tasks, config.seed),
    }
}

/// Trains every task of `trainer` not yet visited and evaluates. A failure
/// part-way yields a report flagged incomplete, scored on the tasks
/// finished before it.
pub fn finish_run(mut trainer: Trainer) -> Result<(RunReport, Trainer)> {
    let mut error = None;
    for task in trainer.state().tasks_done..trainer.stream().len() {
        if let Err(e) = trainer.train_task(task) {
            log::warn!("{}: task {} failed: {e}", trainer.config().tag(), task + 1);
            error = Some(e.to_string());
            break;
        }
        log::debug!(
            "{}: task {} done in {:.1}s",
            trainer.config().tag(),
            task + 1,
            trainer.state().task_seconds[task]
        );
    }
    let accuracies = trainer.evaluate()?;
    let state = trainer.state();
    let mut report = RunReport::new(
        trainer.config().clone(),
        accuracies,
        state.task_seconds.clone(),
        state.loss_curves.clone(),
    );
    if error.is_some() {
        report.complete = false;
        report.error = error;
    }
    Ok((report, trainer))
}

/// Runs a full experiment from scratch.
pub fn run_experiment(config: &RunConfig, mnist: &Mnist) -> Result<RunReport> {
    let stream = build_stream(config, mnist)?;
    let trainer = Trainer::new(config.clone(), stream)?;
    Ok(finish_run(trainer)?.0)
}

/// Like [`run_experiment`] but also returns the final checkpoint.
pub fn run_with_checkpoint(config: &RunConfig, mnist: &Mnist) -> Result<(RunReport, Checkpoint)> {
    let stream = build_stream(config, mnist)?;
    let trainer = Trainer::new(config.clone(), stream)?;
    let (report, trainer) = finish_run(trainer)?;
    let checkpoint = Checkpoint {
        config: trainer.config().clone(),
        state: trainer.into_state(),
    };
    Ok((report, checkpoint))
}

/// Resumes a saved run and trains its remaining tasks.
pub fn resume_experiment(checkpoint: Checkpoint, mnist: &Mnist) -> Result<RunReport> {
    let stream = build_stream(&checkpoint.config, mnist)?;
    let trainer = Trainer::resume(checkpoint.config, stream, checkpoint.state)?;
    Ok(finish_run(trainer)?.0)
}

/// Runs independent configurations on up to `jobs` threads, each with its
/// own state. Results keep the order of `configs`; `on_done` is called
/// once per finished run, one call at a time.
pub fn run_many(
    configs: &[RunConfig],
    mnist: &Mnist,
    jobs: usize,
    on_done: &(dyn Fn(usize, &Result<RunReport>) + Sync),
) -> Vec<Result<RunReport>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunReport>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    let writer = Mutex::new(());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, configs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let r = run_experiment(&configs[i], mnist);
                {
                    let _guard = writer.lock().expect("writer lock");
                    on_done(i, &r);
                }
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every run finished"))
        .collect()
}
