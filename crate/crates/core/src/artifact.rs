//! On-disk record of a tuning run.
//!
//! ```text
//! <dir>/config.json               resolved configuration
//! <dir>/history.csv               one row per evaluation
//! <dir>/surrogate_final.json      final surrogate and best guess
//! <dir>/acquisition_trace.jsonl   one acquisition trace per iteration
//! <dir>/trajectories/eval_NNN.csv per evaluation, when enabled
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gp::SurrogateSnapshot;
use crate::tuner::{write_history, BestGuess, TunerConfig, TuningEvent, TuningRun};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalSurrogate {
    pub surrogate: Option<SurrogateSnapshot>,
    pub best_guess: Option<BestGuess>,
    pub aborted: Option<String>,
}

pub struct ArtifactWriter {
    dir: PathBuf,
    trace: BufWriter<File>,
    save_trajectories: bool,
    evaluations: usize,
}

impl ArtifactWriter {
    /// Creates `dir` (and parents) and writes `config.json`.
    pub fn create(dir: &Path, config: &TunerConfig, save_trajectories: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        if save_trajectories {
            fs::create_dir_all(dir.join("trajectories"))?;
        }
        let config_file = BufWriter::new(File::create(dir.join("config.json"))?);
        serde_json::to_writer_pretty(config_file, config)?;
        let trace = BufWriter::new(File::create(dir.join("acquisition_trace.jsonl"))?);
        Ok(Self { dir: dir.to_path_buf(), trace, save_trajectories, evaluations: 0 })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn record(&mut self, event: &TuningEvent<'_>) -> Result<()> {
        match event {
            TuningEvent::Acquired { iter, trace } => {
                #[derive(Serialize)]
                struct Line<'a, T> {
                    iter: usize,
                    #[serde(flatten)]
                    trace: &'a T,
                }
                serde_json::to_writer(&mut self.trace, &Line { iter: *iter, trace: *trace })?;
                writeln!(self.trace)?;
            }
            TuningEvent::Evaluated { episode, .. } => {
                if self.save_trajectories {
                    let path = self.dir.join("trajectories").join(format!("eval_{:03}.csv", self.evaluations));
                    episode.trajectory.write_csv(BufWriter::new(File::create(path)?), 1)?;
                }
                self.evaluations += 1;
            }
        }
        Ok(())
    }

    /// Writes `history.csv` and `surrogate_final.json`.
    pub fn finish(mut self, config: &TunerConfig, run: &TuningRun) -> Result<()> {
        self.trace.flush()?;
        let mut history = BufWriter::new(File::create(self.dir.join("history.csv"))?);
        write_history(&mut history, config.design_map.dim(), &run.records)?;
        history.flush()?;
        let summary = FinalSurrogate {
            surrogate: run.surrogate.as_ref().map(|s| s.snapshot(&config.design_map.domain)),
            best_guess: run.best_guess.clone(),
            aborted: run.aborted.clone(),
        };
        let mut out = BufWriter::new(File::create(self.dir.join("surrogate_final.json"))?);
        serde_json::to_writer_pretty(&mut out, &summary)?;
        out.flush()?;
        Ok(())
    }
}
