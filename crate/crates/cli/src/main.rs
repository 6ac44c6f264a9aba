fn main() {
    std::process::exit(advnas_cli::dispatch(std::env::args_os()));
}
