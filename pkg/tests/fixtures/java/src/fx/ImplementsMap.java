package fx;

public abstract class ImplementsMap implements java.util.Map {}
