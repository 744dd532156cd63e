use std::fmt;
use std::io::Write;
use std::str::FromStr;

use super::TrainError;

pub const HISTORY_HEADER: &str = "epoch,split,total_loss,dice_loss,focal_loss,mean_dice,accuracy,seconds";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

impl FromStr for Split {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            other => Err(TrainError::History(format!("unknown split {other:?}"))),
        }
    }
}

/// One epoch of one split. `mean_dice` is the foreground mean.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: Split,
    pub total_loss: f64,
    pub dice_loss: f64,
    pub focal_loss: f64,
    pub mean_dice: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

impl HistoryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.total_loss,
            self.dice_loss,
            self.focal_loss,
            self.mean_dice,
            self.accuracy,
            self.seconds
        )
    }

    /// Same row with the wall-clock column cleared, for comparisons.
    pub fn without_time(&self) -> Self {
        Self {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, TrainError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(HISTORY_HEADER) {
            return Err(TrainError::History("missing history header".into()));
        }
        let rows = lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(n, line)| {
                let f: Vec<&str> = line.trim().split(',').collect();
                let err = || TrainError::History(format!("row {}: {line:?}", n + 1));
                if f.len() != 8 {
                    return Err(err());
                }
                let num = |i: usize| f[i].parse::<f64>().map_err(|_| err());
                Ok(HistoryRow {
                    epoch: f[0].parse().map_err(|_| err())?,
                    split: f[1].parse()?,
                    total_loss: num(2)?,
                    dice_loss: num(3)?,
                    focal_loss: num(4)?,
                    mean_dice: num(5)?,
                    accuracy: num(6)?,
                    seconds: num(7)?,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }

    pub fn rows_for(&self, split: Split) -> impl Iterator<Item = &HistoryRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Rows with the wall-clock column cleared.
    pub fn without_time(&self) -> Self {
        Self {
            rows: self.rows.iter().map(HistoryRow::without_time).collect(),
        }
    }
}

/// Appends rows to a CSV file, flushing after each one.
pub struct HistoryWriter {
    file: std::fs::File,
}

impl HistoryWriter {
    /// Creates the file with a header, or appends to an existing one.
    pub fn open(path: &std::path::Path) -> std::io::Result<Self> {
        let exists = path.is_file() && std::fs::metadata(path)?.len() > 0;
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if !exists {
            writeln!(file, "{HISTORY_HEADER}")?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, row: &HistoryRow) -> std::io::Result<()> {
        writeln!(self.file, "{}", row.to_csv())?;
        self.file.flush()
    }
}
