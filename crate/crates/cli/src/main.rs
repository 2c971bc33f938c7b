fn main() {
    if let Err(err) = cadport_cli::run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
