//! MovieLens ratings ingestion and train/test splitting.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::models::Observation;
use crate::rng::{stream_rng, SPLIT_STREAM};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: movie {movie} rated twice by user {user}")]
    Duplicate { line: usize, movie: u64, user: u64 },
    #[error("no ratings found")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplitError {
    #[error("test fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("split of {total} entries leaves {test} for testing and {train} for training")]
    Degenerate { total: usize, train: usize, test: usize },
}

/// Ratings as matrix entries: movies index rows, users index columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Ratings {
    pub triples: Vec<Observation>,
    /// Original movie id of each row, ascending.
    pub movie_ids: Vec<u64>,
    /// Original user id of each column, ascending.
    pub user_ids: Vec<u64>,
}

impl Ratings {
    pub fn rows(&self) -> usize {
        self.movie_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.user_ids.len()
    }

    /// Fraction of matrix cells that are observed.
    pub fn density(&self) -> f64 {
        self.triples.len() as f64 / (self.rows() as f64 * self.cols() as f64)
    }
}

/// Reads `UserID::MovieID::Rating::Timestamp` lines.
pub fn ingest_movielens(path: &Path) -> Result<Ratings, IngestError> {
    let file = File::open(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_movielens(BufReader::new(file)).map_err(|e| match e {
        IngestError::Io { message, .. } => IngestError::Io {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}

/// Blank lines are skipped; ids are re-indexed densely in ascending order.
pub fn parse_movielens<R: BufRead>(reader: R) -> Result<Ratings, IngestError> {
    let mut raw = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| IngestError::Io {
            path: String::new(),
            message: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        let malformed = |reason: String| IngestError::Malformed { line: line_no, reason };
        if fields.len() != 4 {
            return Err(malformed(format!(
                "expected 4 `::`-separated fields, got {}",
                fields.len()
            )));
        }
        let id = |s: &str, what: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| malformed(format!("{what} `{s}` is not a nonnegative integer")))
        };
        let user = id(fields[0], "user id")?;
        let movie = id(fields[1], "movie id")?;
        let rating: f64 = fields[2]
            .trim()
            .parse()
            .ok()
            .filter(|r: &f64| r.is_finite())
            .ok_or_else(|| malformed(format!("rating `{}` is not a finite number", fields[2])))?;
        id(fields[3], "timestamp")?;
        if !seen.insert((movie, user)) {
            return Err(IngestError::Duplicate {
                line: line_no,
                movie,
                user,
            });
        }
        raw.push((movie, user, rating));
    }
    if raw.is_empty() {
        return Err(IngestError::Empty);
    }
    let index = |ids: BTreeMap<u64, usize>| -> (Vec<u64>, BTreeMap<u64, usize>) {
        let keys: Vec<u64> = ids.keys().copied().collect();
        let map = keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        (keys, map)
    };
    let (movie_ids, movies) = index(raw.iter().map(|r| (r.0, 0)).collect());
    let (user_ids, users) = index(raw.iter().map(|r| (r.1, 0)).collect());
    let triples = raw
        .iter()
        .map(|&(m, u, value)| Observation {
            row: movies[&m],
            col: users[&u],
            value,
        })
        .collect();
    Ok(Ratings {
        triples,
        movie_ids,
        user_ids,
    })
}

/// Seeded split with `|test| = round(fraction · N)`; both parts keep input order.
pub fn split_train_test(
    triples: &[Observation],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Observation>, Vec<Observation>), SplitError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SplitError::InvalidFraction(fraction));
    }
    let total = triples.len();
    let test = (fraction * total as f64).round() as usize;
    if test == 0 || test == total {
        return Err(SplitError::Degenerate {
            total,
            train: total - test,
            test,
        });
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut stream_rng(seed, SPLIT_STREAM, 0));
    let mut is_test = vec![false; total];
    for &i in &order[..test] {
        is_test[i] = true;
    }
    let (mut train_set, mut test_set) = (Vec::with_capacity(total - test), Vec::with_capacity(test));
    for (o, t) in triples.iter().zip(is_test) {
        if t {
            test_set.push(*o);
        } else {
            train_set.push(*o);
        }
    }
    Ok((train_set, test_set))
}
