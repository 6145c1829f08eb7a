use std::io::{BufRead, Write};

use anyhow::{bail, Result};
use coldstart_core::interview::MAX_RATING;
use coldstart_core::ModelBundle;
use coldstart_service::Session;

/// Asks `k` questions over `input`/`out`, then prints the top recommendations.
pub fn run(bundle: &ModelBundle, k: usize, top: usize, mut input: impl BufRead, out: &mut impl Write) -> Result<()> {
    let mut session = Session::start("terminal".into(), bundle, k)?;
    let mut line = String::new();
    while let Some(q) = session.pending().cloned() {
        let entry = &bundle.catalog[q.movie as usize];
        write!(
            out,
            "[{}/{k}] Do you like {} ({})? 1-{MAX_RATING}, or 0 if you haven't seen it: ",
            session.answered() + 1,
            entry.title,
            entry.genres.join(", ")
        )?;
        out.flush()?;
        line.clear();
        if input.read_line(&mut line)? == 0 {
            bail!("input ended before the interview finished");
        }
        match line.trim().parse::<i64>() {
            Ok(r) if (0..=i64::from(MAX_RATING)).contains(&r) => session.answer(bundle, r)?,
            _ => writeln!(out, "please answer with a whole number from 0 to {MAX_RATING}")?,
        }
    }
    let recs = session.recommendations(bundle, top)?;
    writeln!(out, "\nRecommended for you:")?;
    for (i, r) in recs.iter().enumerate() {
        writeln!(out, "{:>3}. {:<60} {:.1}", i + 1, r.title, r.predicted_rating)?;
    }
    Ok(())
}
