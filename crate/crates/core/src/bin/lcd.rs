use clap::Parser;
use lcd_engine::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = run(cli, &mut stdout) {
        eprintln!("lcd: {e}");
        std::process::exit(e.exit_code());
    }
}
