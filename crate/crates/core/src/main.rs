fn main() {
    let config = match manet_nc::cli::parse_args(std::env::args_os()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    std::process::exit(manet_nc::cli::run_batch(&config));
}
