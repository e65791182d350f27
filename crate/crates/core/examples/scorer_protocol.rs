//! The line protocol spoken by external tile scorers.

use std::io::Cursor;

use histotype::labels::{ClassifierId, Subtype};
use histotype::scoring::{self, ProcessScorer, ScorePolicy, TileRef};

// Answers every request with target 0.8, except tiles whose id ends in 7.
const SCRIPT: &str = r#"
echo READY
while IFS= read -r line; do
  id=$(printf '%s' "$line" | sed 's/.*"tile_id":"\([^"]*\)".*/\1/')
  case "$id" in
    *7) printf '{"tile_id":"%s","error":"unreadable"}\n' "$id" ;;
    *) printf '{"tile_id":"%s","target":0.8,"rest":0.2}\n' "$id" ;;
  esac
done
echo DONE
"#;

fn main() -> histotype::error::Result<()> {
    let classifier = ClassifierId::Subtype(Subtype::Her2);
    let requests = "{\"tile_id\":\"a\",\"path\":\"/nonexistent/a.png\"}\n";
    let mut transcript = Vec::new();
    scoring::serve_stub(classifier, Cursor::new(requests), &mut transcript).expect("in-memory io");
    print!("built-in stub transcript:\n{}", String::from_utf8_lossy(&transcript));

    let tiles: Vec<TileRef> = (0..10)
        .map(|i| TileRef {
            tile_id: format!("tile_{i}"),
            path: format!("/tiles/tile_{i}.png").into(),
        })
        .collect();
    let command = vec!["sh".to_string(), "-c".to_string(), SCRIPT.to_string(), "scorer".to_string()];
    let scorer = ProcessScorer::new(command, 2, ScorePolicy::default())?;
    match scoring::score_tiles(&scorer, &tiles[..7], classifier) {
        Ok(t) => println!("scored {} tiles", t.len()),
        Err(e) => println!("error: {e}"),
    }
    match scoring::score_tiles(&scorer, &tiles, classifier) {
        Ok(t) => println!("scored {} tiles", t.len()),
        Err(e) => println!("error (exit code {}): {e}", e.exit_code()),
    }
    Ok(())
}
