//! The greedy expert: at each bar, hold the position that profits from the
//! next close.

use std::io::Write;

use crate::env::Action;
use crate::error::{Error, Result};
use crate::market_data::BarSeries;

pub fn expert_action(series: &BarSeries, t: usize) -> Result<Action> {
    if t + 1 >= series.len() || series.is_session_end(t) {
        return Err(Error::SessionBoundary { index: t });
    }
    let (now, next) = (series.close(t), series.close(t + 1));
    Ok(if next > now {
        Action::Long
    } else if next < now {
        Action::Short
    } else {
        Action::Flat
    })
}

/// One expert action per bar; each session's final bar is flat.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertTrajectory {
    actions: Vec<Action>,
}

impl ExpertTrajectory {
    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn action(&self, t: usize) -> Action {
        self.actions[t]
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn write_csv(&self, series: &BarSeries, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "timestamp,action")?;
        for (bar, a) in series.bars().iter().zip(&self.actions) {
            writeln!(out, "{},{}", bar.timestamp, a)?;
        }
        Ok(())
    }
}

pub fn expert_trajectory(series: &BarSeries) -> ExpertTrajectory {
    let actions = (0..series.len())
        .map(|t| expert_action(series, t).unwrap_or(Action::Flat))
        .collect();
    ExpertTrajectory { actions }
}
