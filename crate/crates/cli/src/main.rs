fn main() {
    std::process::exit(rtmae_cli::dispatch(std::env::args()));
}
