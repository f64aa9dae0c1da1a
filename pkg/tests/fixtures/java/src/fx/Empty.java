package fx;

public class Empty {}
