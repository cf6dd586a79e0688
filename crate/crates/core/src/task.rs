use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the three mental tasks. The class index order is MI = 0, MA = 1,
/// IS = 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "MI")]
    MotorImagery,
    #[serde(rename = "MA")]
    MentalArithmetic,
    #[serde(rename = "IS")]
    Idle,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::MotorImagery, Task::MentalArithmetic, Task::Idle];

    pub fn index(self) -> usize {
        match self {
            Task::MotorImagery => 0,
            Task::MentalArithmetic => 1,
            Task::Idle => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Task> {
        Task::ALL.get(index).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            Task::MotorImagery => "MI",
            Task::MentalArithmetic => "MA",
            Task::Idle => "IS",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown task `{0}` (expected MI, MA or IS)")]
pub struct ParseTaskError(pub String);

impl FromStr for Task {
    type Err = ParseTaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "MI" => Ok(Task::MotorImagery),
            "MA" => Ok(Task::MentalArithmetic),
            "IS" => Ok(Task::Idle),
            other => Err(ParseTaskError(other.to_string())),
        }
    }
}
