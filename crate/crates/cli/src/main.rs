fn main() {
    std::process::exit(moeroute_cli::dispatch(std::env::args_os()));
}
