use clap::Parser;
use margin_cert::cli::{run_manifest, Cli};

fn main() {
    let cli = Cli::parse();
    let result = cli.into_manifest().and_then(|m| run_manifest(&m));
    match result {
        Ok(summary) => {
            for f in &summary.files {
                println!("{}", f.display());
            }
        }
        Err(e) => {
            eprintln!("margin-cert: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
