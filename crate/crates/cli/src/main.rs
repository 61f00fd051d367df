use clap::Parser;

fn main() {
    let cli = match psm_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = psm_cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(2);
    }
}
