//! MovieLens ingestion, dense index remapping, and the evaluation split.
//!
//! Ratings files use the MovieLens 1M `UserID::MovieID::Rating::Timestamp`
//! layout and movie catalogues use `MovieID::Title::Genres` (genres separated
//! by `|`). Catalogue files shipped in ISO-8859-1 are transcoded to UTF-8.
//!
//! # Cache format
//!
//! [`RatingsDataset::save_cache`] writes a tab-separated record stream:
//!
//! ```text
//! format  coldstart-dataset  1
//! counts  <users>  <movies>  <ratings>
//! user    <index>  <original id>
//! movie   <index>  <original id>  <title>  <genre|genre|...>
//! rating  <user index>  <movie index>  <rating>  <timestamp>
//! ```
//!
//! Record kinds appear in that order. [`RatingsDataset::save_index_map`]
//! writes just the `user`/`movie` mapping records for external tools.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::seeded_rng;

pub const CACHE_FORMAT: &str = "coldstart-dataset";
pub const CACHE_VERSION: u32 = 1;
pub const SPLIT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub user: u32,
    pub movie: u32,
    pub value: u8,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MovieInfo {
    pub title: String,
    pub genres: Vec<String>,
}

impl MovieInfo {
    pub fn primary_genre(&self) -> Option<&str> {
        self.genres.first().map(String::as_str)
    }
}

/// A rating observation keyed by original (sparse) MovieLens identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawRating {
    pub user_id: u32,
    pub movie_id: u32,
    pub value: u8,
    pub timestamp: i64,
    /// 1-based source line, used for diagnostics.
    pub line: usize,
}

/// Ratings remapped to dense 0-based user and movie indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingsDataset {
    user_ids: Vec<u32>,
    movie_ids: Vec<u32>,
    movies: Vec<MovieInfo>,
    /// Sorted by (user, movie).
    ratings: Vec<Rating>,
    user_offsets: Vec<usize>,
    rating_counts_per_movie: Vec<u32>,
    global_mean: f64,
}

/// Membership bitmap over movie indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MovieSet {
    members: Vec<bool>,
}

impl MovieSet {
    pub fn empty(movie_count: usize) -> Self {
        MovieSet {
            members: vec![false; movie_count],
        }
    }

    pub fn from_indices(movie_count: usize, indices: impl IntoIterator<Item = u32>) -> Self {
        let mut set = MovieSet::empty(movie_count);
        for m in indices {
            set.members[m as usize] = true;
        }
        set
    }

    #[inline]
    pub fn contains(&self, movie: u32) -> bool {
        self.members.get(movie as usize).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl RatingsDataset {
    /// Builds a dataset from raw observations and an optional catalogue.
    ///
    /// Users and movies are reindexed in ascending order of their original
    /// identifiers; only movies with at least one rating receive an index.
    pub fn from_raw(raw: Vec<RawRating>, catalog: &HashMap<u32, MovieInfo>, source: &Path) -> Result<Self> {
        for r in &raw {
            if !(1..=5).contains(&r.value) {
                return Err(Error::Parse {
                    path: source.to_path_buf(),
                    line: r.line,
                    message: format!("rating {} outside 1..=5", r.value),
                });
            }
        }
        let mut user_ids: Vec<u32> = raw.iter().map(|r| r.user_id).collect();
        user_ids.sort_unstable();
        user_ids.dedup();
        let mut movie_ids: Vec<u32> = raw.iter().map(|r| r.movie_id).collect();
        movie_ids.sort_unstable();
        movie_ids.dedup();
        let user_index: HashMap<u32, u32> = user_ids.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();
        let movie_index: HashMap<u32, u32> = movie_ids.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();

        let mut keyed: Vec<(Rating, usize)> = raw
            .iter()
            .map(|r| {
                (
                    Rating {
                        user: user_index[&r.user_id],
                        movie: movie_index[&r.movie_id],
                        value: r.value,
                        timestamp: r.timestamp,
                    },
                    r.line,
                )
            })
            .collect();
        keyed.sort_by_key(|(r, line)| (r.user, r.movie, *line));
        for pair in keyed.windows(2) {
            let (a, _) = pair[0];
            let (b, line) = pair[1];
            if a.user == b.user && a.movie == b.movie {
                return Err(Error::DuplicateRating {
                    path: source.to_path_buf(),
                    line,
                    user_id: user_ids[b.user as usize],
                    movie_id: movie_ids[b.movie as usize],
                });
            }
        }
        let ratings: Vec<Rating> = keyed.into_iter().map(|(r, _)| r).collect();

        let mut missing = 0usize;
        let movies = movie_ids
            .iter()
            .map(|id| match catalog.get(id) {
                Some(info) => info.clone(),
                None => {
                    missing += 1;
                    MovieInfo {
                        title: format!("Movie {id}"),
                        genres: Vec::new(),
                    }
                }
            })
            .collect();
        if missing > 0 && !catalog.is_empty() {
            log::warn!("{missing} rated movies have no catalogue entry");
        }
        Ok(Self::assemble(user_ids, movie_ids, movies, ratings))
    }

    fn assemble(user_ids: Vec<u32>, movie_ids: Vec<u32>, movies: Vec<MovieInfo>, ratings: Vec<Rating>) -> Self {
        let mut user_offsets = vec![0usize; user_ids.len() + 1];
        let mut rating_counts_per_movie = vec![0u32; movie_ids.len()];
        let mut sum = 0u64;
        for r in &ratings {
            user_offsets[r.user as usize + 1] += 1;
            rating_counts_per_movie[r.movie as usize] += 1;
            sum += u64::from(r.value);
        }
        for i in 0..user_ids.len() {
            user_offsets[i + 1] += user_offsets[i];
        }
        let global_mean = if ratings.is_empty() {
            0.0
        } else {
            sum as f64 / ratings.len() as f64
        };
        RatingsDataset {
            user_ids,
            movie_ids,
            movies,
            ratings,
            user_offsets,
            rating_counts_per_movie,
            global_mean,
        }
    }

    pub fn user_count(&self) -> usize {
        self.user_ids.len()
    }

    pub fn movie_count(&self) -> usize {
        self.movie_ids.len()
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    pub fn global_mean(&self) -> f64 {
        self.global_mean
    }

    pub fn rating_counts_per_movie(&self) -> &[u32] {
        &self.rating_counts_per_movie
    }

    pub fn movie(&self, movie: u32) -> Option<&MovieInfo> {
        self.movies.get(movie as usize)
    }

    pub fn movies(&self) -> &[MovieInfo] {
        &self.movies
    }

    pub fn user_id(&self, user: u32) -> Option<u32> {
        self.user_ids.get(user as usize).copied()
    }

    pub fn movie_id(&self, movie: u32) -> Option<u32> {
        self.movie_ids.get(movie as usize).copied()
    }

    pub fn movie_index_of(&self, movie_id: u32) -> Option<u32> {
        self.movie_ids.binary_search(&movie_id).ok().map(|i| i as u32)
    }

    /// The user's ratings as a slice sorted by movie index.
    pub fn user_ratings(&self, user: u32) -> Result<&[Rating]> {
        let u = user as usize;
        if u >= self.user_count() {
            return Err(Error::UnknownUser(user));
        }
        Ok(&self.ratings[self.user_offsets[u]..self.user_offsets[u + 1]])
    }

    /// The rating a user gave a movie, if any.
    pub fn rating(&self, user: u32, movie: u32) -> Option<u8> {
        let slice = self.user_ratings(user).ok()?;
        slice
            .binary_search_by_key(&movie, |r| r.movie)
            .ok()
            .map(|i| slice[i].value)
    }

    /// `(movie, rating)` pairs sorted by movie, optionally filtered to a set.
    pub fn ratings_of(&self, user: u32, restrict_to: Option<&MovieSet>) -> Result<Vec<(u32, u8)>> {
        Ok(self
            .user_ratings(user)?
            .iter()
            .filter(|r| restrict_to.is_none_or(|set| set.contains(r.movie)))
            .map(|r| (r.movie, r.value))
            .collect())
    }

    /// Content hash over the remapped rating triples and identifier maps.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.user_ids {
            h.update(id.to_le_bytes());
        }
        h.update(b"|");
        for id in &self.movie_ids {
            h.update(id.to_le_bytes());
        }
        h.update(b"|");
        for r in &self.ratings {
            h.update(r.user.to_le_bytes());
            h.update(r.movie.to_le_bytes());
            h.update([r.value]);
        }
        hex(&h.finalize())
    }

    /// Keeps only the given users (renumbered densely) and the movies they rated.
    pub fn subsample_users(&self, users: &[u32]) -> Result<Self> {
        let mut raw = Vec::new();
        let mut catalog = HashMap::new();
        for &u in users {
            let uid = self.user_id(u).ok_or(Error::UnknownUser(u))?;
            for r in self.user_ratings(u)? {
                let mid = self.movie_ids[r.movie as usize];
                catalog
                    .entry(mid)
                    .or_insert_with(|| self.movies[r.movie as usize].clone());
                raw.push(RawRating {
                    user_id: uid,
                    movie_id: mid,
                    value: r.value,
                    timestamp: r.timestamp,
                    line: 0,
                });
            }
        }
        Self::from_raw(raw, &catalog, Path::new("<subsample>"))
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "format\t{CACHE_FORMAT}\t{CACHE_VERSION}").map_err(io)?;
        writeln!(
            w,
            "counts\t{}\t{}\t{}",
            self.user_count(),
            self.movie_count(),
            self.ratings.len()
        )
        .map_err(io)?;
        self.write_mapping(&mut w).map_err(io)?;
        for r in &self.ratings {
            writeln!(w, "rating\t{}\t{}\t{}\t{}", r.user, r.movie, r.value, r.timestamp).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn save_index_map(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_mapping(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    fn write_mapping(&self, w: &mut impl Write) -> std::io::Result<()> {
        for (i, id) in self.user_ids.iter().enumerate() {
            writeln!(w, "user\t{i}\t{id}")?;
        }
        for (i, (id, info)) in self.movie_ids.iter().zip(&self.movies).enumerate() {
            writeln!(
                w,
                "movie\t{i}\t{id}\t{}\t{}",
                sanitize(&info.title),
                info.genres.iter().map(|g| sanitize(g)).collect::<Vec<_>>().join("|")
            )?;
        }
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut user_ids = Vec::new();
        let mut movie_ids = Vec::new();
        let mut movies = Vec::new();
        let mut ratings = Vec::new();
        let mut counts: Option<(usize, usize, usize)> = None;
        let mut saw_format = false;
        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[0] {
                "format" => {
                    if fields.get(1) != Some(&CACHE_FORMAT)
                        || fields.get(2) != Some(&CACHE_VERSION.to_string().as_str())
                    {
                        return Err(Error::format(
                            path,
                            format!("expected {CACHE_FORMAT} version {CACHE_VERSION}, found {line:?}"),
                        ));
                    }
                    saw_format = true;
                }
                _ if !saw_format => {
                    return Err(Error::format(path, "missing format header"));
                }
                "counts" if fields.len() == 4 => {
                    let p = |s: &str| s.parse::<usize>().map_err(|e| bad(e.to_string()));
                    counts = Some((p(fields[1])?, p(fields[2])?, p(fields[3])?));
                }
                "user" if fields.len() == 3 => {
                    let idx: usize = fields[1].parse().map_err(|e| bad(format!("{e}")))?;
                    if idx != user_ids.len() {
                        return Err(bad(format!("user index {idx} out of order")));
                    }
                    user_ids.push(fields[2].parse().map_err(|e| bad(format!("{e}")))?);
                }
                "movie" if fields.len() == 5 => {
                    let idx: usize = fields[1].parse().map_err(|e| bad(format!("{e}")))?;
                    if idx != movie_ids.len() {
                        return Err(bad(format!("movie index {idx} out of order")));
                    }
                    movie_ids.push(fields[2].parse().map_err(|e| bad(format!("{e}")))?);
                    movies.push(MovieInfo {
                        title: fields[3].to_string(),
                        genres: split_genres(fields[4]),
                    });
                }
                "rating" if fields.len() == 5 => {
                    let user: u32 = fields[1].parse().map_err(|e| bad(format!("{e}")))?;
                    let movie: u32 = fields[2].parse().map_err(|e| bad(format!("{e}")))?;
                    let value: u8 = fields[3].parse().map_err(|e| bad(format!("{e}")))?;
                    let timestamp: i64 = fields[4].parse().map_err(|e| bad(format!("{e}")))?;
                    if user as usize >= user_ids.len() || movie as usize >= movie_ids.len() {
                        return Err(bad("rating references unknown index".into()));
                    }
                    if !(1..=5).contains(&value) {
                        return Err(bad(format!("rating {value} outside 1..=5")));
                    }
                    ratings.push(Rating {
                        user,
                        movie,
                        value,
                        timestamp,
                    });
                }
                _ => return Err(bad(format!("unrecognised record {:?}", fields[0]))),
            }
        }
        let (nu, nm, nr) = counts.ok_or_else(|| Error::format(path, "missing counts record"))?;
        if (nu, nm, nr) != (user_ids.len(), movie_ids.len(), ratings.len()) {
            return Err(Error::format(path, "record counts disagree with header"));
        }
        if !ratings
            .windows(2)
            .all(|w| (w[0].user, w[0].movie) < (w[1].user, w[1].movie))
        {
            return Err(Error::format(path, "ratings not strictly sorted by (user, movie)"));
        }
        Ok(Self::assemble(user_ids, movie_ids, movies, ratings))
    }

    /// Writes `ratings.dat` and `movies.dat` (UTF-8) in MovieLens layout.
    pub fn write_movielens(&self, ratings_path: &Path, movies_path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.ratings.len() * 24);
        for r in &self.ratings {
            let _ = writeln!(
                out,
                "{}::{}::{}::{}",
                self.user_ids[r.user as usize], self.movie_ids[r.movie as usize], r.value, r.timestamp
            );
        }
        fs::write(ratings_path, out).map_err(|e| Error::io(ratings_path, e))?;
        let mut out = String::new();
        for (id, info) in self.movie_ids.iter().zip(&self.movies) {
            let _ = writeln!(out, "{id}::{}::{}", info.title, info.genres.join("|"));
        }
        fs::write(movies_path, out).map_err(|e| Error::io(movies_path, e))
    }
}

fn sanitize(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

fn split_genres(s: &str) -> Vec<String> {
    s.split('|').filter(|g| !g.is_empty()).map(str::to_string).collect()
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Decodes UTF-8, falling back to ISO-8859-1 (every byte is one code point).
fn decode_text(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        Err(_) => bytes.iter().map(|&b| b as char).collect(),
    }
}

pub fn parse_ratings(path: &Path) -> Result<Vec<RawRating>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = decode_text(&bytes);
    let mut out = Vec::with_capacity(text.len() / 20);
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 '::'-separated fields, found {}", fields.len())));
        }
        let user_id = fields[0]
            .trim()
            .parse()
            .map_err(|e| bad(format!("user id {:?}: {e}", fields[0])))?;
        let movie_id = fields[1]
            .trim()
            .parse()
            .map_err(|e| bad(format!("movie id {:?}: {e}", fields[1])))?;
        let value: i64 = fields[2]
            .trim()
            .parse()
            .map_err(|e| bad(format!("rating {:?}: {e}", fields[2])))?;
        if !(1..=5).contains(&value) {
            return Err(bad(format!("rating {value} outside 1..=5")));
        }
        let timestamp = fields[3]
            .trim()
            .parse()
            .map_err(|e| bad(format!("timestamp {:?}: {e}", fields[3])))?;
        out.push(RawRating {
            user_id,
            movie_id,
            value: value as u8,
            timestamp,
            line: line_no,
        });
    }
    Ok(out)
}

pub fn parse_movies(path: &Path) -> Result<HashMap<u32, MovieInfo>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = decode_text(&bytes);
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let (id, rest) = line
            .split_once("::")
            .ok_or_else(|| bad("expected MovieID::Title::Genres".into()))?;
        let (title, genres) = rest
            .rsplit_once("::")
            .ok_or_else(|| bad("expected MovieID::Title::Genres".into()))?;
        let id: u32 = id.trim().parse().map_err(|e| bad(format!("movie id {id:?}: {e}")))?;
        out.insert(
            id,
            MovieInfo {
                title: title.to_string(),
                genres: split_genres(genres),
            },
        );
    }
    Ok(out)
}

/// Loads MovieLens-format ratings and (optionally) the movie catalogue.
pub fn load_movielens(ratings_path: &Path, movies_path: Option<&Path>) -> Result<RatingsDataset> {
    let raw = parse_ratings(ratings_path)?;
    let catalog = match movies_path {
        Some(p) => parse_movies(p)?,
        None => HashMap::new(),
    };
    RatingsDataset::from_raw(raw, &catalog, ratings_path)
}

/// User partition (train/test) and global movie partition (interview/test).
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSplit {
    pub seed: u64,
    pub user_fraction: f64,
    pub movie_fraction: f64,
    train_users: Vec<u32>,
    test_users: Vec<u32>,
    interview_movies: Vec<u32>,
    test_movies: Vec<u32>,
    is_train_user: Vec<bool>,
    interview_set: MovieSet,
    test_set: MovieSet,
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    format_version: u32,
    seed: u64,
    user_fraction: f64,
    movie_fraction: f64,
    user_count: usize,
    movie_count: usize,
    train_users: Vec<u32>,
    test_users: Vec<u32>,
    interview_movies: Vec<u32>,
    test_movies: Vec<u32>,
}

fn prefix_len(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).floor() as usize).clamp(1, n - 1)
}

/// Seeded 75/25-style partition of users and movies.
///
/// Users and movies are each shuffled with one seeded generator and the
/// first `floor(n · fraction)` entries form the train users / interview movies.
pub fn make_split(
    dataset: &RatingsDataset,
    user_fraction: f64,
    movie_fraction: f64,
    seed: u64,
) -> Result<EvaluationSplit> {
    for (name, f) in [("user", user_fraction), ("movie", movie_fraction)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::invalid(format!("{name} fraction {f} outside (0, 1)")));
        }
    }
    let (nu, nm) = (dataset.user_count(), dataset.movie_count());
    if nu < 2 || nm < 2 {
        return Err(Error::invalid(format!(
            "split needs at least 2 users and 2 movies, found {nu} and {nm}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut users: Vec<u32> = (0..nu as u32).collect();
    users.shuffle(&mut rng);
    let mut movies: Vec<u32> = (0..nm as u32).collect();
    movies.shuffle(&mut rng);
    let cut_u = prefix_len(nu, user_fraction);
    let cut_m = prefix_len(nm, movie_fraction);
    EvaluationSplit::from_parts(
        seed,
        user_fraction,
        movie_fraction,
        nu,
        nm,
        users[..cut_u].to_vec(),
        users[cut_u..].to_vec(),
        movies[..cut_m].to_vec(),
        movies[cut_m..].to_vec(),
    )
}

impl EvaluationSplit {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        seed: u64,
        user_fraction: f64,
        movie_fraction: f64,
        user_count: usize,
        movie_count: usize,
        mut train_users: Vec<u32>,
        mut test_users: Vec<u32>,
        mut interview_movies: Vec<u32>,
        mut test_movies: Vec<u32>,
    ) -> Result<Self> {
        for v in [
            &mut train_users,
            &mut test_users,
            &mut interview_movies,
            &mut test_movies,
        ] {
            v.sort_unstable();
        }
        check_partition(user_count, &train_users, &test_users, "users")?;
        check_partition(movie_count, &interview_movies, &test_movies, "movies")?;
        let mut is_train_user = vec![false; user_count];
        for &u in &train_users {
            is_train_user[u as usize] = true;
        }
        let interview_set = MovieSet::from_indices(movie_count, interview_movies.iter().copied());
        let test_set = MovieSet::from_indices(movie_count, test_movies.iter().copied());
        Ok(EvaluationSplit {
            seed,
            user_fraction,
            movie_fraction,
            train_users,
            test_users,
            interview_movies,
            test_movies,
            is_train_user,
            interview_set,
            test_set,
        })
    }

    pub fn train_users(&self) -> &[u32] {
        &self.train_users
    }

    pub fn test_users(&self) -> &[u32] {
        &self.test_users
    }

    pub fn interview_movies(&self) -> &[u32] {
        &self.interview_movies
    }

    pub fn test_movies(&self) -> &[u32] {
        &self.test_movies
    }

    pub fn interview_set(&self) -> &MovieSet {
        &self.interview_set
    }

    pub fn test_set(&self) -> &MovieSet {
        &self.test_set
    }

    pub fn is_train_user(&self, user: u32) -> bool {
        self.is_train_user.get(user as usize).copied().unwrap_or(false)
    }

    pub fn is_test_movie(&self, movie: u32) -> bool {
        self.test_set.contains(movie)
    }

    pub fn user_count(&self) -> usize {
        self.is_train_user.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = SplitFile {
            format_version: SPLIT_FORMAT_VERSION,
            seed: self.seed,
            user_fraction: self.user_fraction,
            movie_fraction: self.movie_fraction,
            user_count: self.is_train_user.len(),
            movie_count: self.interview_set.members.len(),
            train_users: self.train_users.clone(),
            test_users: self.test_users.clone(),
            interview_movies: self.interview_movies.clone(),
            test_movies: self.test_movies.clone(),
        };
        let json = serde_json::to_string_pretty(&file).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: SplitFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if f.format_version != SPLIT_FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!(
                    "split format version {} (expected {SPLIT_FORMAT_VERSION})",
                    f.format_version
                ),
            ));
        }
        Self::from_parts(
            f.seed,
            f.user_fraction,
            f.movie_fraction,
            f.user_count,
            f.movie_count,
            f.train_users,
            f.test_users,
            f.interview_movies,
            f.test_movies,
        )
    }

    /// Checks that this split was made for a dataset of the given shape.
    pub fn matches(&self, dataset: &RatingsDataset) -> bool {
        self.is_train_user.len() == dataset.user_count() && self.interview_set.members.len() == dataset.movie_count()
    }
}

fn check_partition(total: usize, a: &[u32], b: &[u32], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(total);
    for &x in a.iter().chain(b) {
        if x as usize >= total || !seen.insert(x) {
            return Err(Error::invalid(format!(
                "{what} partition is not disjoint or out of range"
            )));
        }
    }
    if seen.len() != total {
        return Err(Error::invalid(format!("{what} partition does not cover all {total}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    fn tiny() -> RatingsDataset {
        let raw = [(10, 3, 4), (10, 1, 5), (20, 1, 2), (30, 7, 3)]
            .iter()
            .enumerate()
            .map(|(i, &(u, m, v))| RawRating {
                user_id: u,
                movie_id: m,
                value: v,
                timestamp: 0,
                line: i + 1,
            })
            .collect();
        RatingsDataset::from_raw(raw, &HashMap::new(), Path::new("mem")).unwrap()
    }

    #[test]
    fn single_line_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "ratings.dat", b"1::1::5::0\n");
        let ds = load_movielens(&p, None).unwrap();
        assert_eq!((ds.user_count(), ds.movie_count(), ds.ratings().len()), (1, 1, 1));
        assert_eq!(ds.global_mean(), 5.0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "ratings.dat", b"1::1::5::0\n2::1::4\n");
        match load_movielens(&p, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rating_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "ratings.dat", b"1::1::6::0\n");
        assert!(matches!(load_movielens(&p, None), Err(Error::Parse { line: 1, .. })));
        let p = write(&dir, "zero.dat", b"1::1::0::0\n");
        assert!(load_movielens(&p, None).is_err());
    }

    #[test]
    fn duplicate_pair_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "ratings.dat", b"1::1::5::0\n2::1::3::0\n1::1::4::9\n");
        match load_movielens(&p, None) {
            Err(Error::DuplicateRating {
                line,
                user_id,
                movie_id,
                ..
            }) => {
                assert_eq!((line, user_id, movie_id), (3, 1, 1));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn latin1_titles_transcoded() {
        let dir = tempfile::tempdir().unwrap();
        let r = write(&dir, "ratings.dat", b"1::7::4::0\n");
        let m = write(&dir, "movies.dat", b"7::Caf\xe9 Society (1995)::Comedy|Drama\n");
        let ds = load_movielens(&r, Some(&m)).unwrap();
        let info = ds.movie(0).unwrap();
        assert_eq!(info.title, "Café Society (1995)");
        assert_eq!(info.genres, vec!["Comedy", "Drama"]);
    }

    #[test]
    fn sparse_ids_are_remapped_densely() {
        let ds = tiny();
        assert_eq!(ds.user_count(), 3);
        assert_eq!(ds.movie_count(), 3);
        assert_eq!(ds.user_id(2), Some(30));
        assert_eq!(ds.movie_index_of(7), Some(2));
        assert_eq!(ds.rating_counts_per_movie(), &[2, 1, 1]);
        assert!((ds.global_mean() - 3.5).abs() < 1e-12);
    }

    #[test]
    fn ratings_of_sorts_and_filters() {
        let ds = tiny();
        // user 10 rated movie ids 3 -> idx 1 with 4 and 1 -> idx 0 with 5
        assert_eq!(ds.ratings_of(0, None).unwrap(), vec![(0, 5), (1, 4)]);
        let only = MovieSet::from_indices(3, [1]);
        assert_eq!(ds.ratings_of(0, Some(&only)).unwrap(), vec![(1, 4)]);
        assert_eq!(ds.ratings_of(0, Some(&MovieSet::empty(3))).unwrap(), vec![]);
        assert!(matches!(ds.ratings_of(9, None), Err(Error::UnknownUser(9))));
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        assert_eq!(prefix_len(6040, 0.75), 4530);
        assert_eq!(prefix_len(3706, 0.75), 2779);
        assert_eq!(3706 - prefix_len(3706, 0.75), 927);
    }

    #[test]
    fn split_rejects_degenerate_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "ratings.dat", b"1::1::5::0\n");
        let ds = load_movielens(&p, None).unwrap();
        assert!(make_split(&ds, 0.75, 0.75, 1).is_err());
        assert!(make_split(&tiny(), 1.0, 0.5, 1).is_err());
        assert!(make_split(&tiny(), 0.5, 0.0, 1).is_err());
    }

    #[test]
    fn split_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let split = make_split(&tiny(), 0.5, 0.5, 42).unwrap();
        let p = dir.path().join("split.json");
        split.save(&p).unwrap();
        assert_eq!(EvaluationSplit::load(&p).unwrap(), split);
    }

    #[test]
    fn cache_rejects_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "cache.tsv", b"format\tcoldstart-dataset\t99\n");
        assert!(matches!(RatingsDataset::load_cache(&p), Err(Error::Format { .. })));
    }

    fn arb_dataset() -> impl Strategy<Value = RatingsDataset> {
        proptest::collection::btree_map((1u32..40, 1u32..60), (1u8..=5, 0i64..1_000_000), 1..200).prop_map(|m| {
            let raw = m
                .into_iter()
                .enumerate()
                .map(|(i, ((u, mv), (v, ts)))| RawRating {
                    user_id: u * 3,
                    movie_id: mv * 7,
                    value: v,
                    timestamp: ts,
                    line: i + 1,
                })
                .collect();
            let catalog = (1u32..60)
                .map(|m| {
                    (
                        m * 7,
                        MovieInfo {
                            title: format!("Title {m} (19{m:02})"),
                            genres: vec!["Drama".into()],
                        },
                    )
                })
                .collect();
            RatingsDataset::from_raw(raw, &catalog, Path::new("gen")).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cache_and_movielens_round_trip(ds in arb_dataset()) {
            let dir = tempfile::tempdir().unwrap();
            let cache = dir.path().join("ds.tsv");
            ds.save_cache(&cache).unwrap();
            let back = RatingsDataset::load_cache(&cache).unwrap();
            prop_assert_eq!(&back, &ds);

            let r = dir.path().join("ratings.dat");
            let m = dir.path().join("movies.dat");
            ds.write_movielens(&r, &m).unwrap();
            let again = load_movielens(&r, Some(&m)).unwrap();
            prop_assert_eq!(again.ratings(), ds.ratings());
            prop_assert_eq!(again.global_mean(), ds.global_mean());
            prop_assert_eq!(again.movies(), ds.movies());
        }

        #[test]
        fn split_partitions_every_rating(ds in arb_dataset(), seed in any::<u64>()) {
            prop_assume!(ds.user_count() >= 2 && ds.movie_count() >= 2);
            let split = make_split(&ds, 0.75, 0.75, seed).unwrap();
            prop_assert_eq!(make_split(&ds, 0.75, 0.75, seed).unwrap(), split.clone());
            let mut cells = [0usize; 4];
            for r in ds.ratings() {
                let u = usize::from(!split.is_train_user(r.user));
                let m = usize::from(split.is_test_movie(r.movie));
                prop_assert_ne!(split.interview_set().contains(r.movie), split.test_set().contains(r.movie));
                cells[u * 2 + m] += 1;
            }
            prop_assert_eq!(cells.iter().sum::<usize>(), ds.ratings().len());
            prop_assert_eq!(split.train_users().len() + split.test_users().len(), ds.user_count());
        }
    }

    #[test]
    fn different_seeds_give_different_partitions() {
        let raw = (0..100u32)
            .flat_map(|u| (0..4u32).map(move |m| (u, m)))
            .enumerate()
            .map(|(i, (u, m))| RawRating {
                user_id: u,
                movie_id: m + (u % 5),
                value: 3,
                timestamp: 0,
                line: i + 1,
            })
            .collect();
        let ds = RatingsDataset::from_raw(raw, &HashMap::new(), Path::new("mem")).unwrap();
        let splits: Vec<_> = (0..10).map(|s| make_split(&ds, 0.75, 0.75, s).unwrap()).collect();
        for i in 0..splits.len() {
            for j in (i + 1)..splits.len() {
                assert_ne!(splits[i].train_users(), splits[j].train_users());
            }
        }
    }
}
